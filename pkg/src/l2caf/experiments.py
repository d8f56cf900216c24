"""End-to-end pipelines behind the CLI: heatmaps per method, WSOL evaluation, timing and sanity checks."""

from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np
from scipy import stats

from . import attention as att
from . import baselines as bl
from .attention import CafConfig, CafResult
from .errors import IncompatibleModelError
from .evaluation import (EvalRecord, clustering_nmi, heatmap_box, recall_at_1_hits, topk_record)
from .images import bilinear_resize, minmax_rescale
from .network import NetworkModel, forward, predict, randomize

METHODS = ("l2caf", "l2caf-fast", "l2caf-class", "softmax", "gaussian", "grad-cam", "grad-cam-abs", "cam")
CLS_METHODS = ("l2caf-fast", "l2caf-class", "grad-cam", "cam")
RET_METHODS = ("l2caf-fast", "grad-cam", "grad-cam-abs")

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Pool size from ``L2CAF_THREADS`` (default 1: sequential)."""
    raw = os.environ.get("L2CAF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Order-preserving map over a thread pool capped by :func:`worker_count`."""
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def check_method(model: NetworkModel, method: str) -> None:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    logits = model.head.kind == "logits"
    if method == "l2caf-class" and not logits:
        raise IncompatibleModelError("l2caf-class needs a logits head")
    if method == "cam":
        bl.cam_layer(model)
    if method == "grad-cam-abs" and logits:
        raise IncompatibleModelError("grad-cam-abs is defined for embedding heads")


def saliency_grid(model: NetworkModel, x: np.ndarray, method: str, cfg: CafConfig,
                  c: int | None = None, trace: list[np.ndarray] | None = None,
                  at_layer: int | None = None) -> np.ndarray:
    """Feature-resolution attention grid for one image and method.

    ``c`` is the target class for class-specific methods on logits heads
    (defaults to the predicted class).
    """
    check_method(model, method)
    if trace is None:
        _, trace = forward(model, x)
    logits = model.head.kind == "logits"
    if c is None and logits:
        c = int(np.argmax(trace[model.output_layer]))
    result: CafResult
    if method == "l2caf":
        result = att.optimize_class_oblivious(model, x, at_layer, cfg)
    elif method == "l2caf-fast":
        result = att.optimize_fast(model, trace, at_layer, cfg=cfg)
    elif method == "l2caf-class":
        result = att.optimize_fast(model, trace, at_layer, cfg=cfg, objective=int(c))
    elif method == "softmax":
        result = att.optimize_fast(model, trace, at_layer, cfg=cfg, constraint="softmax")
    elif method == "gaussian":
        result = att.optimize_fast(model, trace, at_layer, cfg=cfg, constraint="gaussian")
    elif method == "cam":
        return bl.cam(model, x, c).grid
    elif logits:
        return bl.grad_cam(model, x, at_layer, c).grid
    else:
        mode = "abs" if method == "grad-cam-abs" else "relu"
        return bl.grad_cam_retrieval(model, x, at_layer, mode).grid
    return result.attention_grid()


def to_heatmap(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return minmax_rescale(bilinear_resize(grid, size))


def method_heatmap(model: NetworkModel, x: np.ndarray, method: str, cfg: CafConfig,
                   c: int | None = None, trace=None, at_layer: int | None = None) -> np.ndarray:
    size = tuple(np.asarray(x).shape[-3:-1])
    return to_heatmap(saliency_grid(model, x, method, cfg, c, trace, at_layer), size)


# ---------------------------------------------------------------------------
# WSOL evaluation
# ---------------------------------------------------------------------------

@dataclass
class MethodSummary:
    method: str
    accuracy: float  # top-k classification accuracy or R@1
    nmi: float | None
    loc: float
    delta: float | None  # loc minus vanilla grad-cam loc


@dataclass
class WsolReport:
    kind: str  # "classification" | "retrieval"
    records: dict[str, list[EvalRecord]]
    summaries: list[MethodSummary]

    def rows(self) -> Iterable[tuple[str, EvalRecord]]:
        """(method, record) pairs sorted by image id, then method."""
        pairs = [(m, r) for m, recs in self.records.items() for r in recs]
        return sorted(pairs, key=lambda p: (p[1].image_id, p[0]))


def evaluate_wsol(model: NetworkModel, images: np.ndarray, labels: np.ndarray, boxes: Sequence,
                  methods: Sequence[str], cfg: CafConfig | None = None, theta_frac: float = 0.2,
                  top_k: int = 1, nmi_seed: int = 0) -> WsolReport:
    """Localization accuracy per method on a labeled set with ground-truth boxes.

    A classification hit needs the true class among the top ``top_k``
    predictions and IoU >= 0.5 for that class's own heatmap. A retrieval hit
    needs an R@1 hit and IoU >= 0.5.
    """
    cfg = cfg or CafConfig()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    for m in methods:
        check_method(model, m)
    size = images.shape[-3:-1]
    retrieval = model.head.kind == "embedding"
    outputs = predict(model, images)
    nmi_value = None
    if retrieval:
        final = np.stack([forward(model, x)[0] for x in images])
        correct = recall_at_1_hits(final, labels)
        accuracy = float(np.mean(correct))
        nmi_value = clustering_nmi(final, labels, seed=nmi_seed)
        ranked = []
    else:
        ranked = [list(np.argsort(-o, kind="stable")[:top_k]) for o in outputs]
        correct = np.array([int(y) in r for y, r in zip(labels, ranked)])
        accuracy = float(np.mean(correct))

    def one_image(i: int) -> dict[str, EvalRecord]:
        x = images[i]
        _, trace = forward(model, x)
        out = {}
        for m in methods:
            image_id = f"{i:05d}"
            if retrieval:
                box = heatmap_box(to_heatmap(saliency_grid(model, x, m, cfg, None, trace), size), theta_frac)
                out[m] = EvalRecord.build(image_id, bool(correct[i]), box, boxes[i])
            else:
                wanted = [int(labels[i])] if correct[i] else [int(ranked[i][0])]
                class_boxes = {c: heatmap_box(to_heatmap(saliency_grid(model, x, m, cfg, c, trace), size),
                                              theta_frac) for c in wanted}
                out[m] = topk_record(image_id, ranked[i], int(labels[i]), class_boxes, boxes[i], top_k)
        return out

    per_image = parallel_map(one_image, list(range(len(images))))
    records = {m: [d[m] for d in per_image] for m in methods}
    locs = {m: float(np.mean([r.localization_hit for r in recs])) for m, recs in records.items()}
    base = locs.get("grad-cam")
    summaries = [MethodSummary(m, accuracy, nmi_value, locs[m], None if base is None else locs[m] - base)
                 for m in methods]
    return WsolReport("retrieval" if retrieval else "classification", records, summaries)


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------

BENCH_METHODS = ("l2caf", "l2caf-fast", "grad-cam")


@dataclass
class BenchRow:
    image_id: str
    method: str
    seconds: float
    iterations: int
    heatmap_digest: str


def _timed_heatmap(model: NetworkModel, x: np.ndarray, method: str, cfg: CafConfig) -> tuple[float, int, np.ndarray]:
    size = x.shape[-3:-1]
    start = time.perf_counter()
    if method == "l2caf":
        res = att.optimize_class_oblivious(model, x, None, cfg)
        grid, iters = res.attention_grid(), res.iterations
    elif method == "l2caf-fast":
        _, trace = forward(model, x)
        res = att.optimize_fast(model, trace, cfg=cfg)
        grid, iters = res.attention_grid(), res.iterations
    else:
        grid, iters = saliency_grid(model, x, method, cfg), 1
    heat = to_heatmap(grid, size)
    return time.perf_counter() - start, iters, heat


def bench(model: NetworkModel, images: np.ndarray, methods: Sequence[str] = BENCH_METHODS,
          cfg: CafConfig | None = None) -> list[BenchRow]:
    """Wall-clock seconds per image and method (run sequentially so timings do not interfere)."""
    cfg = cfg or CafConfig()
    rows = []
    for i, x in enumerate(np.asarray(images, dtype=np.float64)):
        for m in methods:
            seconds, iters, heat = _timed_heatmap(model, x, m, cfg)
            digest = hashlib.sha256(np.ascontiguousarray(heat).tobytes()).hexdigest()[:16]
            rows.append(BenchRow(f"{i:05d}", m, seconds, iters, digest))
    return rows


def median_seconds(rows: Sequence[BenchRow]) -> dict[str, float]:
    by_method: dict[str, list[float]] = {}
    for r in rows:
        by_method.setdefault(r.method, []).append(r.seconds)
    return {m: float(np.median(v)) for m, v in by_method.items()}


# ---------------------------------------------------------------------------
# Sanity checks
# ---------------------------------------------------------------------------

SCOPES = ("none", "logits-layer", "all-layers")


def rank_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman correlation of two heatmaps; 1.0 for identical maps, 0.0 if either is constant."""
    a, b = np.ravel(a), np.ravel(b)
    if np.array_equal(a, b):
        return 1.0
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(stats.spearmanr(a, b).statistic)


@dataclass
class SanityRow:
    scope: str
    seed: int
    spearman: float


def sanity(model: NetworkModel, x: np.ndarray, scopes: Sequence[str] = SCOPES, seeds: Sequence[int] = (0, 1, 2),
           cfg: CafConfig | None = None) -> tuple[np.ndarray, list[SanityRow], dict[tuple[str, int], np.ndarray]]:
    """Trained-model heatmap vs heatmaps after randomizing the logits layer or all weights."""
    cfg = cfg or CafConfig()
    if model.head.kind != "logits":
        raise IncompatibleModelError("sanity checks need a classification model")
    for s in scopes:
        if s not in SCOPES:
            raise ValueError(f"unknown scope {s!r}; choose from {SCOPES}")
    reference = method_heatmap(model, x, "l2caf-fast", cfg)
    rows, maps = [], {}
    for scope in scopes:
        for seed in (seeds if scope != "none" else [0]):
            other = model if scope == "none" else randomize(model, scope, seed)
            heat = method_heatmap(other, x, "l2caf-fast", cfg)
            maps[(scope, seed)] = heat
            rows.append(SanityRow(scope, seed, rank_correlation(reference, heat)))
    return reference, rows, maps


# ---------------------------------------------------------------------------
# Seeded datasets and presets
# ---------------------------------------------------------------------------

TRAIN_KINDS = ("cls", "ret-triplet", "ret-npair", "rnn")
DEFAULT_EPOCHS = {"cls": 20, "ret-triplet": 10, "ret-npair": 10, "rnn": 5}
STREAM_TRAIN_DATA, STREAM_INIT, STREAM_TRAIN, STREAM_TEST_DATA = range(4)


def derive_seed(root: int, *keys: int) -> int:
    """Independent child seed for ``keys`` under ``root`` (no global RNG state)."""
    return int(np.random.SeedSequence([root, *keys]).generate_state(1, dtype=np.uint32)[0])


def shapes_split(seed: int, stream: int, n: int, noise_sigma: float, image_size: int = 32,
                 frames: int | None = None):
    """Images, labels and per-image boxes for one seeded split (sequences when ``frames`` is set)."""
    from . import data

    split_seed = derive_seed(seed, stream)
    if frames is None:
        samples = data.generate_shapes(n, image_size, image_size, noise_sigma=noise_sigma, seed=split_seed)
        images, labels = data.as_arrays(samples)
        return images, labels, [s.box for s in samples]
    events = data.generate_sequence(n, frames, image_size, image_size, noise_sigma=noise_sigma, seed=split_seed)
    images, labels = data.sequences_as_arrays(events)
    return images, labels, [[f.box for f in ev] for ev in events]


def train_preset(kind: str, seed: int, *, epochs: int | None = None, lr: float | None = None,
                 n_train: int = 2000, noise_sigma: float = 0.2, image_size: int = 32, frames: int = 3,
                 history: list | None = None) -> NetworkModel:
    """Train the preset matching ``kind`` on generated shapes; every random draw derives from ``seed``."""
    from .network import build_preset, train_classifier, train_retrieval

    if kind not in TRAIN_KINDS:
        raise ValueError(f"unknown training kind {kind!r}; choose from {TRAIN_KINDS}")
    epochs = DEFAULT_EPOCHS[kind] if epochs is None else epochs
    init_seed, train_seed = derive_seed(seed, STREAM_INIT), derive_seed(seed, STREAM_TRAIN)
    if kind == "cls":
        images, labels, _ = shapes_split(seed, STREAM_TRAIN_DATA, n_train, noise_sigma, image_size)
        model = build_preset("tiny-cls", init_seed, image_size=image_size)
        return train_classifier(model, images, labels, epochs, 0.1 if lr is None else lr, train_seed,
                                history=history)
    if kind == "rnn":
        images, labels, _ = shapes_split(seed, STREAM_TRAIN_DATA, n_train, noise_sigma, image_size, frames)
        model = build_preset("tiny-rnn", init_seed, image_size=image_size, frames=frames)
        loss_kind = "triplet"
    else:
        images, labels, _ = shapes_split(seed, STREAM_TRAIN_DATA, n_train, noise_sigma, image_size)
        loss_kind = kind.removeprefix("ret-")
        model = build_preset("tiny-ret", init_seed, image_size=image_size, normalize=loss_kind == "triplet")
    return train_retrieval(model, images, labels, loss_kind, epochs, 0.05 if lr is None else lr, train_seed,
                           history=history)
