"""Ranking losses for retrieval training: triplet with semi-hard mining, and N-pair."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.2

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")


@dataclass
class MiniBatch:
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.labels = np.asarray(self.labels)
        if self.labels.size == 0:
            raise ValueError("labels must be nonempty")
        if len(self.embeddings) != len(self.labels):
            raise ValueError("one label per embedding required")

    def distances(self) -> np.ndarray:
        diff = self.embeddings[:, None, :] - self.embeddings[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))


def triplet_loss(d_ap: float, d_an: float, cfg: TripletConfig = TripletConfig()) -> float:
    """Hinge ``max(0, d_ap - d_an + m)`` on Euclidean distances."""
    if d_ap < 0 or d_an < 0:
        raise ValueError("distances must be non-negative")
    return max(0.0, d_ap - d_an + cfg.margin)


def semi_hard_from_distances(d_ap: float, d_neg: np.ndarray, cfg: TripletConfig) -> np.ndarray:
    """Positions ``k`` in ``d_neg`` with ``d_ap < d_neg[k] < d_ap + m``.

    Falls back to the hardest (closest) negative when the band is empty.
    """
    d_neg = np.asarray(d_neg, dtype=np.float64)
    if d_neg.size == 0:
        raise ValueError("no negatives available")
    band = np.flatnonzero((d_neg > d_ap) & (d_neg < d_ap + cfg.margin))
    if band.size:
        return band
    return np.array([int(np.argmin(d_neg))])


def semi_hard_negatives(batch: MiniBatch, anchor: int, positive: int,
                        cfg: TripletConfig = TripletConfig()) -> np.ndarray:
    """Batch indices of the semi-hard negatives for one anchor-positive pair."""
    negatives = np.flatnonzero(batch.labels != batch.labels[anchor])
    if negatives.size == 0:
        raise ValueError("batch has no sample with a label different from the anchor")
    ea = batch.embeddings[anchor]
    d_ap = float(np.linalg.norm(ea - batch.embeddings[positive]))
    d_neg = np.linalg.norm(batch.embeddings[negatives] - ea, axis=1)
    return negatives[semi_hard_from_distances(d_ap, d_neg, cfg)]


def mine_triplets(dist: np.ndarray, labels: np.ndarray, cfg: TripletConfig) -> np.ndarray:
    """All (anchor, positive, semi-hard negative) index triples of a batch."""
    labels = np.asarray(labels)
    out = []
    for a in range(len(labels)):
        neg = np.flatnonzero(labels != labels[a])
        if neg.size == 0:
            continue
        for p in np.flatnonzero(labels == labels[a]):
            if p == a:
                continue
            for n in neg[semi_hard_from_distances(dist[a, p], dist[a, neg], cfg)]:
                out.append((a, p, n))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def batch_triplet_loss(emb: Tensor, labels: np.ndarray, cfg: TripletConfig = TripletConfig(),
                       eps: float = 1e-12) -> Tensor:
    """Mean triplet hinge over every anchor-positive pair and its semi-hard negatives."""
    e = emb.data
    dist = np.sqrt(np.maximum(np.sum((e[:, None] - e[None]) ** 2, axis=-1), 0.0))
    triples = mine_triplets(dist, labels, cfg)
    if len(triples) == 0:
        return ad.tsum(ad.mul(emb, 0.0))
    a, p, n = emb[triples[:, 0]], emb[triples[:, 1]], emb[triples[:, 2]]
    d_ap = ad.sqrt(ad.squared_l2_distance(a, p) + eps)
    d_an = ad.sqrt(ad.squared_l2_distance(a, n) + eps)
    return ad.mean(ad.relu(d_ap - d_an + cfg.margin))


def npair_structure(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each anchor: its positive partner and its ``b - 2`` negatives.

    The batch must contain exactly one positive pair per class.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts != 2):
        bad = classes[counts != 2].tolist()
        raise ValueError(f"N-pair batches need exactly one positive pair per class; bad classes {bad}")
    b = len(labels)
    positives = np.empty(b, dtype=np.int64)
    negatives = np.empty((b, b - 2), dtype=np.int64)
    for i in range(b):
        same = np.flatnonzero(labels == labels[i])
        positives[i] = same[same != i][0]
        negatives[i] = np.flatnonzero(labels != labels[i])
    return positives, negatives


def npair_term(anchor: np.ndarray, positive: np.ndarray, negatives: np.ndarray) -> float:
    """``-log(e^{a.p} / (e^{a.p} + sum_n e^{a.n}))`` with max-subtraction."""
    logits = np.concatenate([[anchor @ positive], np.atleast_2d(negatives) @ anchor])
    top = logits.max()
    return float(top + np.log(np.sum(np.exp(logits - top))) - logits[0])


def npair_loss(batch: MiniBatch) -> float:
    """Mean of :func:`npair_term` over every anchor of a one-pair-per-class batch."""
    positives, negatives = npair_structure(batch.labels)
    e = batch.embeddings
    return sum(npair_term(e[i], e[positives[i]], e[negatives[i]]) for i in range(len(e))) / len(e)


def batch_npair_loss(emb: Tensor, labels: np.ndarray) -> Tensor:
    positives, negatives = npair_structure(labels)
    b = len(labels)
    sims = ad.gram(emb)
    cols = np.concatenate([positives[:, None], negatives], axis=1)
    rows = np.repeat(np.arange(b)[:, None], cols.shape[1], axis=1)
    logits = sims[rows, cols]
    return -ad.mean(ad.log_softmax(logits)[:, 0])

