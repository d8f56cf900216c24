"""Heatmap resizing/rescaling and binary PGM/PPM output."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # corner-aligned sampling: output 0 -> input 0, output n_out-1 -> input n_in-1
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear_resize(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-d grid to ``size = (rows, cols)`` with corner-aligned sampling."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-d grid, got shape {grid.shape}")
    r0, r1, rw = _axis_weights(grid.shape[0], size[0])
    c0, c1, cw = _axis_weights(grid.shape[1], size[1])
    top = grid[r0][:, c0] * (1 - cw) + grid[r0][:, c1] * cw
    bottom = grid[r1][:, c0] * (1 - cw) + grid[r1][:, c1] * cw
    return top * (1 - rw)[:, None] + bottom * rw[:, None]


def minmax_rescale(grid: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]. A constant positive grid maps to ones; an all-zero grid stays zero."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        return (grid - lo) / (hi - lo)
    return np.ones_like(grid) if hi > 0 else np.zeros_like(grid)


def quantize(heatmap: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(heatmap) * 255.0), 0, 255).astype(np.uint8)


def pgm_bytes(heatmap: np.ndarray) -> bytes:
    """Binary P5 graymap of a [0, 1] heatmap."""
    q = quantize(heatmap)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def ppm_bytes(image: np.ndarray) -> bytes:
    """Binary P6 pixmap of an ``(H, W, 3)`` image in [0, 1]."""
    q = quantize(image)
    h, w, _ = q.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary P5/P6 file back into a float array in [0, 1]."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, w, h, maxval, body = parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
    channels = {b"P5": 1, b"P6": 3}[magic]
    arr = np.frombuffer(body[: w * h * channels], dtype=np.uint8).astype(np.float64) / maxval
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a heatmap (rendered as red-to-blue) over an RGB image."""
    heat = np.stack([heatmap, np.zeros_like(heatmap), 1.0 - heatmap], axis=-1)
    return (1 - alpha) * np.asarray(image, dtype=np.float64) + alpha * heat


def draw_box(image: np.ndarray, box, color=(0.0, 1.0, 0.0)) -> np.ndarray:
    out = np.array(image, dtype=np.float64, copy=True)
    if box is None:
        return out
    x0, y0, x1, y1 = box.x_min, box.y_min, box.x_max - 1, box.y_max - 1
    out[y0, x0:x1 + 1] = color
    out[y1, x0:x1 + 1] = color
    out[y0:y1 + 1, x0] = color
    out[y0:y1 + 1, x1] = color
    return out
