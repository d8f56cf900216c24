"""Localization and retrieval metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError

IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class BoundingBox:
    """Pixel box covering columns ``[x_min, x_max)`` and rows ``[y_min, y_max)``."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"box outside image: {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def threshold_heatmap(heatmap: np.ndarray, theta_frac: float = 0.2) -> np.ndarray:
    """Cells at or above ``theta_frac`` of the maximum. An all-zero heatmap yields an empty mask."""
    if not 0 < theta_frac < 1:
        raise ValueError(f"theta_frac must lie in (0, 1), got {theta_frac}")
    heatmap = np.asarray(heatmap, dtype=np.float64)
    top = heatmap.max()
    if top <= 0:
        return np.zeros(heatmap.shape, dtype=bool)
    return heatmap >= theta_frac * top


_EIGHT = np.ones((3, 3), dtype=bool)


def largest_component_box(mask: np.ndarray) -> BoundingBox:
    """Tight box around the largest 8-connected component.

    Equal-size components are ordered by their first pixel in raster order.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("empty mask: localization miss")
    labels, n = ndimage.label(mask, structure=_EIGHT)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    # ndimage numbers components in raster order of their first pixel, so argmax keeps the earliest
    best = int(np.argmax(sizes)) + 1
    rows, cols = np.nonzero(labels == best)
    return BoundingBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


def heatmap_box(heatmap: np.ndarray, theta_frac: float = 0.2) -> BoundingBox | None:
    """Estimated box for a heatmap, or None when the mask is empty."""
    mask = threshold_heatmap(heatmap, theta_frac)
    if not mask.any():
        return None
    return largest_component_box(mask)


@dataclass(frozen=True)
class EvalRecord:
    image_id: str
    prediction_correct: bool
    estimated_box: BoundingBox | None
    gt_box: BoundingBox
    iou: float
    localization_hit: bool

    @classmethod
    def build(cls, image_id: str, prediction_correct: bool, estimated_box: BoundingBox | None,
              gt_box: BoundingBox) -> "EvalRecord":
        overlap = iou(estimated_box, gt_box) if estimated_box is not None else 0.0
        hit = bool(prediction_correct) and overlap >= IOU_THRESHOLD
        return cls(str(image_id), bool(prediction_correct), estimated_box, gt_box, overlap, hit)


def topk_record(image_id: str, ranked_classes: Sequence[int], true_class: int,
                boxes: dict[int, BoundingBox | None], gt_box: BoundingBox, k: int = 5) -> EvalRecord:
    """Top-k localization: a hit needs the true class among the top ``k`` and its own box to overlap."""
    top = [int(c) for c in ranked_classes[:k]]
    correct = int(true_class) in top
    box = boxes.get(int(true_class)) if correct else boxes.get(top[0])
    return EvalRecord.build(image_id, correct, box, gt_box)


def localization_accuracy(records: Iterable[EvalRecord]) -> float:
    records = list(records)
    if not records:
        raise ValueError("no records")
    return sum(r.localization_hit for r in records) / len(records)


def nearest_neighbors(embeddings: np.ndarray) -> np.ndarray:
    """Index of each sample's Euclidean nearest neighbor (excluding itself; ties -> lower index)."""
    e = np.asarray(embeddings, dtype=np.float64)
    if len(e) < 2:
        raise ValueError("need at least two samples")
    diff = e[:, None, :] - e[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, np.inf)
    return np.argmin(dist, axis=1)


def recall_at_1_hits(embeddings: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    return labels[nearest_neighbors(embeddings)] == labels


def recall_at_1(embeddings: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(recall_at_1_hits(embeddings, labels)))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def _same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


def nmi(labels_true: Sequence, labels_pred: Sequence) -> float:
    """``I(true, pred) / sqrt(H(true) H(pred))``; 1.0/0.0 by partition identity when an entropy is zero."""
    t = np.asarray(labels_true)
    p = np.asarray(labels_pred)
    if t.size == 0 or t.size != p.size:
        raise ValueError("labels must be nonempty and of equal length")
    _, ti = np.unique(t, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    joint = np.zeros((ti.max() + 1, pi.max() + 1))
    np.add.at(joint, (ti, pi), 1.0)
    h_t, h_p = _entropy(joint.sum(axis=1)), _entropy(joint.sum(axis=0))
    if h_t == 0.0 or h_p == 0.0:
        return 1.0 if _same_partition(ti, pi) else 0.0
    pj = joint / joint.sum()
    outer = np.outer(pj.sum(axis=1), pj.sum(axis=0))
    nz = pj > 0
    mi = float(np.sum(pj[nz] * np.log(pj[nz] / outer[nz])))
    return float(np.clip(mi / np.sqrt(h_t * h_p), 0.0, 1.0))


def kmeans_labels(embeddings: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """k-means++ seeding, 10 restarts, lowest inertia."""
    from sklearn.cluster import KMeans

    e = np.asarray(embeddings, dtype=np.float64)
    if len(e) == 0:
        raise ValueError("empty input")
    if not 1 <= k <= len(e):
        raise ValueError(f"k must lie in [1, {len(e)}]")
    return KMeans(n_clusters=k, init="k-means++", n_init=10, random_state=seed).fit_predict(e)


def clustering_nmi(embeddings: np.ndarray, labels: np.ndarray, k: int | None = None, seed: int = 0) -> float:
    labels = np.asarray(labels)
    k = len(np.unique(labels)) if k is None else k
    return nmi(labels, kmeans_labels(embeddings, k, seed))


METRIC_FIELDS = ("image_id", "method", "prediction_correct", "iou", "loc_hit")


def write_metrics_csv(path: str | Path, rows: Iterable[tuple[str, EvalRecord]]) -> None:
    """One row per (method, record) with a mandatory header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for method, r in rows:
            writer.writerow([r.image_id, method, int(r.prediction_correct), f"{r.iou:.6f}", int(r.localization_hit)])
