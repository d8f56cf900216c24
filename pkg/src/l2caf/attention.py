"""Constrained attention filters optimized post hoc against a frozen network.

The filter is a ``rows x cols`` grid multiplied into every channel of a
convolutional feature map. It is optimized by plain gradient descent on an
unconstrained variable; the constraint is enforced by reparameterization in
the forward pass (``f / ||f||`` for the L2 filter, ``softmax(f)`` or a unit
Gaussian bump for the alternatives).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateFilterError, IncompatibleModelError, ShapeError
from .images import bilinear_resize, minmax_rescale
from .network import NetworkModel, check_input, forward, run_layers

CONSTRAINTS = ("l2", "softmax", "gaussian")


@dataclass(frozen=True)
class CafConfig:
    """Descent settings.

    With ``relative`` the objective is divided by the size of the unfiltered
    output (``||NT||^2`` for the oblivious loss, ``||NT||_1`` for the class
    loss). The minimizer is unchanged but ``lr`` and ``epsilon`` stop
    depending on whether the head emits logits, raw embeddings or the tiny
    outputs of a randomized network. ``mu_lr`` is the step for the Gaussian
    variant, whose only parameter is a position measured in cells.
    """

    lr: float = 1000.0
    epsilon: float = 1e-5
    d: int = 50
    max_iters: int = 1000
    seed: int = 0
    relative: bool = True
    mu_lr: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.mu_lr <= 0:
            raise ValueError("step sizes must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.d < 1:
            raise ValueError("d must be at least 1")
        if self.max_iters < self.d + 1:
            raise ValueError("max_iters must be at least d + 1")


@dataclass
class AttentionFilter:
    raw: np.ndarray

    @property
    def height(self) -> int:
        return self.raw.shape[0]

    @property
    def width(self) -> int:
        return self.raw.shape[1]

    def normalized(self) -> np.ndarray:
        """The filter actually applied to the feature map: ``raw / ||raw||``."""
        norm = np.linalg.norm(self.raw)
        if norm == 0:
            raise DegenerateFilterError("zero filter")
        return self.raw / norm

    def magnitude(self) -> np.ndarray:
        """``|raw| / ||raw||``, the view used for heatmaps."""
        return np.abs(self.normalized())


@dataclass(frozen=True)
class GaussianFilterParams:
    mu: np.ndarray
    sigma: np.ndarray = field(default_factory=lambda: np.eye(2))


@dataclass
class CafResult:
    filter: AttentionFilter
    loss_history: list[float]
    iterations: int
    terminated_by: str  # "converged" | "max-iters"
    constraint: str = "l2"
    # loss_history is the optimized objective; multiply by this to get the unscaled loss
    loss_scale: float = 1.0
    # per-iteration L2 norm (l2) or sum (softmax) of the applied filter
    constraint_history: list[float] = field(default_factory=list)
    gaussian: GaussianFilterParams | None = None

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1]

    def attention_grid(self) -> np.ndarray:
        """The filter-resolution attention map, before resizing and rescaling."""
        if self.constraint == "l2":
            return self.filter.magnitude()
        if self.constraint == "softmax":
            z = np.exp(self.filter.raw - self.filter.raw.max())
            return z / z.sum()
        return gaussian_grid(self.gaussian.mu, self.filter.raw.shape)


def gaussian_grid(mu: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return np.exp(-((rows - mu[0]) ** 2 + (cols - mu[1]) ** 2) / 2.0)


# ---------------------------------------------------------------------------
# Optimization core
# ---------------------------------------------------------------------------

def initial_filter(shape: tuple[int, int], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=shape)


def _constrained_view(constraint: str, var: Tensor, shape: tuple[int, int]) -> tuple[Tensor, float]:
    if constraint == "l2":
        view = ad.l2_normalize(var)
        return view, float(np.sqrt(np.sum(view.data ** 2)))
    if constraint == "softmax":
        view = ad.reshape(ad.softmax(ad.reshape(var, (-1,))), shape)
        return view, float(view.data.sum())
    if constraint == "gaussian":
        rows, cols = np.meshgrid(np.arange(shape[0], dtype=np.float64),
                                 np.arange(shape[1], dtype=np.float64), indexing="ij")
        dr = ad.sub(rows, var[0])
        dc = ad.sub(cols, var[1])
        view = ad.exp(ad.mul(ad.add(ad.square(dr), ad.square(dc)), -0.5))
        return view, float(view.data.max())
    raise ValueError(f"unknown constraint {constraint!r}; choose from {CONSTRAINTS}")


def _step(loss_of_view: Callable[[Tensor], Tensor], raw: np.ndarray, shape: tuple[int, int],
          constraint: str) -> tuple[float, np.ndarray, float]:
    var = ad.parameter(raw)
    view, applied = _constrained_view(constraint, var, shape)
    loss = loss_of_view(view)
    loss.backward()
    g = var.grad if var.grad is not None else np.zeros_like(raw)
    return loss.item(), g, applied


def _descend(loss_of_view: Callable[[Tensor], Tensor], shape: tuple[int, int], cfg: CafConfig,
             constraint: str = "l2", scale: float = 1.0) -> CafResult:
    scale = scale if cfg.relative and scale > 0 else 1.0
    if scale != 1.0:
        unscaled, inv = loss_of_view, 1.0 / scale
        loss_of_view = lambda view: ad.mul(unscaled(view), inv)  # noqa: E731
    if constraint == "gaussian":
        rng = np.random.default_rng(cfg.seed)
        raw = np.array([rng.uniform(0, shape[0] - 1), rng.uniform(0, shape[1] - 1)])
    else:
        raw = initial_filter(shape, cfg.seed)
    history: list[float] = []
    constraint_history: list[float] = []
    terminated = "max-iters"
    lr = cfg.mu_lr if constraint == "gaussian" else cfg.lr
    for it in range(1, cfg.max_iters + 1):
        loss, g, applied = _step(loss_of_view, raw, shape, constraint)
        history.append(loss)
        constraint_history.append(applied)
        if it > cfg.d and abs(history[-1] - history[-1 - cfg.d]) < cfg.epsilon:
            terminated = "converged"
            break
        if it == cfg.max_iters:
            break
        raw = raw - lr * g
        if constraint == "l2" and not np.any(raw):
            raise DegenerateFilterError("filter collapsed to zero during optimization")
    if constraint == "gaussian":
        result_filter = AttentionFilter(gaussian_grid(raw, shape))
        params = GaussianFilterParams(mu=raw.copy())
    else:
        result_filter, params = AttentionFilter(raw), None
    return CafResult(result_filter, history, len(history), terminated, constraint, scale,
                     constraint_history, params)


def _objective_fn(model: NetworkModel, objective, target: np.ndarray | None) -> Callable[[Tensor], Tensor]:
    if objective == "oblivious":
        t = Tensor(target)
        return lambda out: ad.tsum(ad.square(ad.sub(out, t)))
    if isinstance(objective, (int, np.integer)) and not isinstance(objective, bool):
        if model.head.kind != "logits":
            raise IncompatibleModelError("class-specific filters need a logits head")
        n = model.head.size
        if not 0 <= objective < n:
            raise ValueError(f"class {objective} out of range for {n} classes")
        signs = np.ones(n)
        signs[objective] = -1.0
        # -FT_c + sum_{i != c} FT_i
        return lambda out: ad.tsum(ad.mul(out, signs))
    raise ValueError(f"objective must be 'oblivious' or a class index, got {objective!r}")


def output_scale(objective, target: np.ndarray) -> float:
    """Size of the unfiltered output that the relative objective divides by."""
    target = np.asarray(target, dtype=np.float64)
    return float(np.sum(target ** 2)) if objective == "oblivious" else float(np.sum(np.abs(target)))


def _check_filter_layer(model: NetworkModel, at_layer: int | None) -> tuple[int, tuple[int, int]]:
    at_layer = model.feature_layer if at_layer is None else at_layer
    if not 0 <= at_layer < len(model.layers):
        raise ShapeError(f"layer {at_layer} does not exist")
    shp = model.shapes[at_layer]
    if len(shp) < 3:
        raise ShapeError(f"layer {at_layer} output {shp} is not a spatial feature map")
    return at_layer, (shp[-3], shp[-2])


def filter_objective(model: NetworkModel, *, x: np.ndarray | None = None, trace: list[np.ndarray] | None = None,
                     at_layer: int | None = None, endpoint_layer: int | None = None,
                     objective="oblivious") -> tuple[Callable[[Tensor], Tensor], tuple[int, int], float]:
    """The unscaled loss as a function of the applied filter view, the filter shape and :func:`output_scale`.

    With ``x`` every evaluation reruns the network from the input; with
    ``trace`` it starts from the cached activation at ``at_layer`` and
    targets ``trace[endpoint_layer]``.
    """
    if (x is None) == (trace is None):
        raise ValueError("pass exactly one of x or trace")
    at_layer, shape = _check_filter_layer(model, at_layer)
    stop = model.output_layer
    if trace is None:
        x = check_input(model, x)
        _, trace = forward(model, x)
        start = Tensor(x)
        endpoint_layer = stop
    else:
        start = None
        endpoint_layer = stop if endpoint_layer is None else endpoint_layer
        if not at_layer < endpoint_layer < len(model.layers):
            raise ValueError(f"endpoint layer {endpoint_layer} must come after filter layer {at_layer}")
        if objective != "oblivious" and endpoint_layer != stop:
            raise ValueError("class-specific objectives need the logits as endpoint")
    loss_fn = _objective_fn(model, objective, trace[endpoint_layer])
    params = model.param_tensors()
    v = Tensor(trace[at_layer])

    def loss_of_view(view: Tensor) -> Tensor:
        feats = v if start is None else run_layers(model, start, 0, at_layer, params)
        out = run_layers(model, ad.broadcast_spatial_multiply(feats, view), at_layer + 1, endpoint_layer, params)
        return loss_fn(out)

    return loss_of_view, shape, output_scale(objective, trace[endpoint_layer])


def objective_value_and_grad(model: NetworkModel, raw: np.ndarray, constraint: str = "l2",
                             **kwargs) -> tuple[float, np.ndarray]:
    """Unscaled loss and its gradient w.r.t. the raw filter."""
    loss_of_view, shape, _ = filter_objective(model, **kwargs)
    loss, g, _ = _step(loss_of_view, np.asarray(raw, dtype=np.float64), shape, constraint)
    return loss, g


def _vanilla(model: NetworkModel, x: np.ndarray, at_layer: int, cfg: CafConfig, objective,
             constraint: str) -> CafResult:
    loss_of_view, shape, scale = filter_objective(model, x=x, at_layer=at_layer, objective=objective)
    return _descend(loss_of_view, shape, cfg, constraint, scale)


def optimize_class_oblivious(model: NetworkModel, x: np.ndarray, at_layer: int | None = None,
                             cfg: CafConfig | None = None) -> CafResult:
    """Minimize ``||NT(x) - FT(x, f/||f||)||^2`` running the whole network every iteration."""
    return _vanilla(model, x, at_layer, cfg or CafConfig(), "oblivious", "l2")


def optimize_class_specific(model: NetworkModel, x: np.ndarray, at_layer: int | None, c: int,
                            cfg: CafConfig | None = None) -> CafResult:
    """Minimize ``-FT_c + sum_{i != c} FT_i`` under the unit-norm constraint."""
    if model.head.kind != "logits":
        raise IncompatibleModelError("class-specific filters need a logits head")
    return _vanilla(model, x, at_layer, cfg or CafConfig(), int(c), "l2")


def optimize_fast(model: NetworkModel, trace: list[np.ndarray], at_layer: int | None = None,
                  endpoint_layer: int | None = None, cfg: CafConfig | None = None,
                  objective="oblivious", constraint: str = "l2") -> CafResult:
    """Optimize from cached activations: ``V = trace[at_layer]`` in, ``V' = trace[endpoint]`` as target.

    Only the layers strictly after ``at_layer`` up to ``endpoint_layer`` run
    inside the loop.
    """
    loss_of_view, shape, scale = filter_objective(model, trace=trace, at_layer=at_layer,
                                                  endpoint_layer=endpoint_layer, objective=objective)
    return _descend(loss_of_view, shape, cfg or CafConfig(), constraint, scale)


def optimize_softmax_filter(model: NetworkModel, x: np.ndarray, at_layer: int | None = None,
                            cfg: CafConfig | None = None, objective="oblivious") -> CafResult:
    return _vanilla(model, x, at_layer, cfg or CafConfig(), objective, "softmax")


def optimize_gaussian_filter(model: NetworkModel, x: np.ndarray, at_layer: int | None = None,
                             cfg: CafConfig | None = None, objective="oblivious") -> CafResult:
    """Optimize only the mean of a unit-covariance Gaussian filter (peak value 1).

    Steps use ``cfg.mu_lr`` rather than ``cfg.lr``.
    """
    return _vanilla(model, x, at_layer, cfg or CafConfig(), objective, "gaussian")


def optimize_recurrent_sequence(model: NetworkModel, frames, cfg: CafConfig | None = None,
                                at_layer: int | None = None) -> list[CafResult]:
    """One class-oblivious filter per frame, optimized one frame at a time.

    While filter ``t`` is optimized it multiplies only frame ``t``'s feature
    map; every other frame passes through unfiltered.
    """
    cfg = cfg or CafConfig()
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not model.is_recurrent or len(model.input_shape) != 4:
        raise IncompatibleModelError("recurrent optimization needs a model with a RecurrentFuse layer")
    n_frames = model.input_shape[0]
    if len(frames) != n_frames:
        raise ShapeError(f"model expects {n_frames} frames, got {len(frames)}")
    x = check_input(model, np.stack(frames))
    at_layer, shape = _check_filter_layer(model, at_layer)
    stop = model.output_layer
    _, trace = forward(model, x)
    loss_fn = _objective_fn(model, "oblivious", trace[stop])
    params = model.param_tensors()
    v = Tensor(trace[at_layer])
    ones = Tensor(np.ones(shape))
    results = []
    for t in range(n_frames):
        def loss_of_view(view: Tensor, t=t) -> Tensor:
            mask = ad.stack([view if s == t else ones for s in range(n_frames)])
            out = run_layers(model, ad.broadcast_spatial_multiply(v, mask), at_layer + 1, stop, params)
            return loss_fn(out)

        results.append(_descend(loss_of_view, shape, cfg, "l2", output_scale("oblivious", trace[stop])))
    return results


def heatmap_from_filter(result: CafResult, target_size: tuple[int, int]) -> np.ndarray:
    """Resize the attention grid to ``target_size`` and min-max rescale to [0, 1]."""
    grid = result.attention_grid()
    if target_size[0] < grid.shape[0] or target_size[1] < grid.shape[1]:
        raise ValueError(f"target size {target_size} smaller than filter {grid.shape}")
    return minmax_rescale(bilinear_resize(grid, target_size))
