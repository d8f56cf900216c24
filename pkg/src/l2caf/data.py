"""Synthetic single-object images with exact ground-truth boxes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import BoundingBox
from .images import ppm_bytes

SHAPES = ("square", "disk", "cross", "triangle", "ring")
DEFAULT_CLASSES = SHAPES[:4]
COLORS = {
    "square": (0.95, 0.25, 0.2),
    "disk": (0.2, 0.9, 0.3),
    "cross": (0.25, 0.4, 1.0),
    "triangle": (0.95, 0.9, 0.2),
    "ring": (0.9, 0.3, 0.9),
}


@dataclass
class SyntheticSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    label: int
    box: BoundingBox
    seed: int
    class_name: str = ""


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` stencil whose tight box is the whole patch."""
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    mid = (size - 1) / 2.0
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind in ("disk", "ring"):
        rad2 = (r - mid) ** 2 + (c - mid) ** 2
        outer = rad2 <= (mid + 0.5) ** 2
        if kind == "disk":
            return outer
        return outer & (rad2 > (0.5 * mid) ** 2)
    if kind == "cross":
        half = max(1, size // 3) / 2.0
        if size % 2 == 0:
            half = max(half, 1.0)  # even patches have no center row; keep at least two
        return (np.abs(r - mid) < half) | (np.abs(c - mid) < half)
    if kind == "triangle":
        return np.abs(c - mid) <= (r + 1) / size * (mid + 0.5)
    raise ValueError(f"unknown shape {kind!r}")


def _sample_seeds(seed: int, n: int) -> list[int]:
    return [int(np.random.SeedSequence([seed, i]).generate_state(1, dtype=np.uint64)[0]) for i in range(n)]


def _class_assignment(seed: int, n: int, n_classes: int) -> np.ndarray:
    labels = np.arange(n) % n_classes
    return np.random.default_rng([seed, 2**31]).permutation(labels)


def _scale_bounds(H: int, W: int, scale_range: tuple[float, float]) -> tuple[int, int]:
    m = min(H, W)
    lo = max(2, math.ceil(scale_range[0] * m))
    hi = max(lo, math.floor(scale_range[1] * m))
    return lo, hi


def _render(shape: np.ndarray, color, top: int, left: int, H: int, W: int, noise: np.ndarray) -> np.ndarray:
    image = noise.copy()
    s = shape.shape[0]
    patch = image[top:top + s, left:left + s]
    patch[shape] = color
    return image


def _validate(n: int, H: int, W: int, classes: Sequence[str]) -> None:
    if n < 1:
        raise ValueError("n must be at least 1")
    if H < 16 or W < 16:
        raise ValueError("images must be at least 16x16")
    unknown = set(classes) - set(SHAPES)
    if unknown or not classes:
        raise ValueError(f"classes must be a nonempty subset of {SHAPES}")


def generate_sequence(n_events: int, T: int, H: int = 32, W: int = 32,
                      classes: Sequence[str] = DEFAULT_CLASSES, noise_sigma: float = 0.2,
                      seed: int = 0, max_shift: int | None = None,
                      scale_range: tuple[float, float] = (0.2, 0.6)) -> list[list[SyntheticSample]]:
    """Events of ``T`` frames showing one shape moving on a straight line.

    Frame ``t`` places the shape at ``round(start + (end - start) * t / (T - 1))``
    where ``end`` lies within ``max_shift`` pixels of ``start`` (default H // 4).
    ``T = 1`` reproduces :func:`generate_shapes` exactly.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    _validate(n_events, H, W, classes)
    max_shift = H // 4 if max_shift is None else max_shift
    labels = _class_assignment(seed, n_events, len(classes))
    lo, hi = _scale_bounds(H, W, scale_range)
    events = []
    for label, sseed in zip(labels, _sample_seeds(seed, n_events)):
        rng = np.random.default_rng(sseed)
        kind = classes[label]
        size = int(rng.integers(lo, hi + 1))
        stencil = shape_mask(kind, size)
        start = np.array([rng.integers(0, H - size + 1), rng.integers(0, W - size + 1)])
        if T > 1:
            end = np.array([
                rng.integers(max(0, start[0] - max_shift), min(H - size, start[0] + max_shift) + 1),
                rng.integers(max(0, start[1] - max_shift), min(W - size, start[1] + max_shift) + 1),
            ])
        else:
            end = start
        frames = []
        for t in range(T):
            frac = t / (T - 1) if T > 1 else 0.0
            top, left = (int(v) for v in np.rint(start + (end - start) * frac))
            noise = rng.uniform(0.0, noise_sigma, size=(H, W, 3)) if noise_sigma > 0 else np.zeros((H, W, 3))
            image = _render(stencil, COLORS[kind], top, left, H, W, noise)
            rows, cols = np.nonzero(stencil)
            box = BoundingBox(left + int(cols.min()), top + int(rows.min()),
                              left + int(cols.max()) + 1, top + int(rows.max()) + 1)
            frames.append(SyntheticSample(image, int(label), box, sseed, kind))
        events.append(frames)
    return events


def generate_shapes(n: int, H: int = 32, W: int = 32, classes: Sequence[str] = DEFAULT_CLASSES,
                    noise_sigma: float = 0.2, seed: int = 0,
                    scale_range: tuple[float, float] = (0.2, 0.6)) -> list[SyntheticSample]:
    """``n`` images with one colored shape on a uniform-noise background.

    Classes are balanced (counts differ by at most one) and every sample is
    generated from its own seed derived from ``(seed, index)``.
    """
    return [ev[0] for ev in generate_sequence(n, 1, H, W, classes, noise_sigma, seed, 0, scale_range)]


def as_arrays(samples: Sequence[SyntheticSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples])


def sequences_as_arrays(events: Sequence[Sequence[SyntheticSample]]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([np.stack([f.image for f in ev]) for ev in events]),
            np.array([ev[0].label for ev in events]))


def dump_dataset(samples: Sequence[SyntheticSample], directory: str | Path) -> Path:
    """Write ``<id>.ppm`` images plus ``manifest.csv`` (id, class, box, seed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class", "x_min", "y_min", "x_max", "y_max", "seed"])
        for i, s in enumerate(samples):
            image_id = f"{i:05d}"
            (directory / f"{image_id}.ppm").write_bytes(ppm_bytes(s.image))
            writer.writerow([image_id, s.label, *s.box.as_tuple(), s.seed])
    return manifest
