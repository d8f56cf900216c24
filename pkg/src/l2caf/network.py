"""Toy CNNs: layer specs, shape checking, forward passes and training loops."""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import ClassVar, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import IncompatibleModelError, ShapeError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    kh: int
    kw: int
    c_out: int
    stride: int = 1
    padding: int = 0
    kind: ClassVar[str] = "conv"


@dataclass(frozen=True)
class ReLU:
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class GAP:
    kind: ClassVar[str] = "gap"


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "flatten"


@dataclass(frozen=True)
class Dense:
    out_dim: int
    kind: ClassVar[str] = "dense"


@dataclass(frozen=True)
class EmbedNormalize:
    kind: ClassVar[str] = "embed_normalize"


@dataclass(frozen=True)
class RecurrentFuse:
    hidden_dim: int
    kind: ClassVar[str] = "recurrent_fuse"


LayerSpec = Conv | ReLU | GAP | Flatten | Dense | EmbedNormalize | RecurrentFuse
LAYER_TYPES = {cls.kind: cls for cls in (Conv, ReLU, GAP, Flatten, Dense, EmbedNormalize, RecurrentFuse)}


def layer_to_dict(spec: LayerSpec) -> dict:
    return {"kind": spec.kind, **dataclasses.asdict(spec)}


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_TYPES[kind](**d)


@dataclass(frozen=True)
class Head:
    kind: str  # "logits" | "embedding"
    size: int

    def __post_init__(self):
        if self.kind not in ("logits", "embedding"):
            raise ValueError(f"head kind must be 'logits' or 'embedding', got {self.kind!r}")


def infer_shapes(input_shape: Sequence[int], layers: Sequence[LayerSpec]) -> list[tuple[int, ...]]:
    """Per-layer output shapes for one sample; raises ShapeError on any inconsistency."""
    shape = tuple(int(s) for s in input_shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid input shape {shape}")
    out = []
    for i, spec in enumerate(layers):
        where = f"layer {i} ({spec.kind})"
        if isinstance(spec, Conv):
            if len(shape) < 3:
                raise ShapeError(f"{where}: needs a spatial input, got {shape}")
            if spec.stride < 1 or spec.padding < 0 or min(spec.kh, spec.kw, spec.c_out) < 1:
                raise ShapeError(f"{where}: invalid conv parameters {spec}")
            h, w = shape[-3] + 2 * spec.padding, shape[-2] + 2 * spec.padding
            if h < spec.kh or w < spec.kw:
                raise ShapeError(f"{where}: padded input {h}x{w} smaller than kernel")
            shape = shape[:-3] + ((h - spec.kh) // spec.stride + 1, (w - spec.kw) // spec.stride + 1, spec.c_out)
        elif isinstance(spec, GAP):
            if len(shape) < 3:
                raise ShapeError(f"{where}: needs a spatial input, got {shape}")
            shape = shape[:-3] + (shape[-1],)
        elif isinstance(spec, Flatten):
            if len(shape) < 3:
                raise ShapeError(f"{where}: needs a spatial input, got {shape}")
            shape = shape[:-3] + (shape[-3] * shape[-2] * shape[-1],)
        elif isinstance(spec, Dense):
            if spec.out_dim < 1:
                raise ShapeError(f"{where}: out_dim must be positive")
            shape = shape[:-1] + (spec.out_dim,)
        elif isinstance(spec, RecurrentFuse):
            if len(shape) != 2 or spec.hidden_dim < 1:
                raise ShapeError(f"{where}: needs a (frames, features) input, got {shape}")
            shape = (spec.hidden_dim,)
        elif isinstance(spec, (ReLU, EmbedNormalize)):
            pass
        else:
            raise ShapeError(f"{where}: unsupported layer {spec!r}")
        out.append(shape)
    return out


def param_shapes(spec: LayerSpec, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    if isinstance(spec, Conv):
        return {"kernel": (spec.kh, spec.kw, in_shape[-1], spec.c_out), "bias": (spec.c_out,)}
    if isinstance(spec, Dense):
        return {"weight": (in_shape[-1], spec.out_dim), "bias": (spec.out_dim,)}
    if isinstance(spec, RecurrentFuse):
        hdim = spec.hidden_dim
        return {"w_input": (in_shape[-1], 2 * hdim), "w_hidden": (hdim, 2 * hdim), "bias": (2 * hdim,)}
    return {}


def _fan_in(name: str, shape: tuple[int, ...], spec: LayerSpec) -> int:
    if isinstance(spec, Conv):
        return shape[0] * shape[1] * shape[2] if name == "kernel" else spec.kh * spec.kw
    if isinstance(spec, RecurrentFuse):
        return shape[0] if name != "bias" else spec.hidden_dim
    return shape[0]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class NetworkModel:
    """Ordered layers, their weights, the head kind and named endpoints.

    ``endpoints`` always holds ``features`` (default filter insertion layer)
    and ``output`` (the raw output: logits, or the embedding before unit
    normalization).
    """

    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    weights: list[dict[str, np.ndarray]]
    head: Head
    endpoints: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes = infer_shapes(self.input_shape, self.layers)
        if len(self.weights) != len(self.layers):
            raise ShapeError("weights must have one entry per layer")
        in_shapes = [self.input_shape] + self.shapes[:-1]
        for i, (spec, w, in_shape) in enumerate(zip(self.layers, self.weights, in_shapes)):
            expected = param_shapes(spec, in_shape)
            if set(w) != set(expected):
                raise ShapeError(f"layer {i}: expected parameters {sorted(expected)}, got {sorted(w)}")
            for name, shp in expected.items():
                if tuple(w[name].shape) != shp:
                    raise ShapeError(f"layer {i}.{name}: expected shape {shp}, got {w[name].shape}")
        defaults = default_endpoints(self.layers, self.shapes)
        self.endpoints = {**defaults, **self.endpoints}
        out_shape = self.shapes[self.endpoints["output"]]
        if out_shape != (self.head.size,):
            raise ShapeError(f"{self.head.kind} head of size {self.head.size} but output shape is {out_shape}")
        for name, idx in self.endpoints.items():
            if not 0 <= idx < len(self.layers):
                raise ShapeError(f"endpoint {name!r} refers to missing layer {idx}")
        feat = self.endpoints.get("features")
        if feat is not None and not any(isinstance(s, Conv) for s in self.layers[: feat + 1]):
            raise ShapeError("a filter insertion point needs at least one preceding Conv")

    @property
    def output_layer(self) -> int:
        return self.endpoints["output"]

    @property
    def feature_layer(self) -> int:
        return self.endpoints["features"]

    @property
    def is_recurrent(self) -> bool:
        return any(isinstance(s, RecurrentFuse) for s in self.layers)

    def copy(self) -> "NetworkModel":
        return NetworkModel(self.input_shape, list(self.layers), copy.deepcopy(self.weights),
                            self.head, dict(self.endpoints))

    def param_tensors(self, trainable: bool = False) -> list[dict[str, Tensor]]:
        wrap = ad.parameter if trainable else Tensor
        return [{k: wrap(v) for k, v in w.items()} for w in self.weights]


def default_endpoints(layers: Sequence[LayerSpec], shapes: Sequence[tuple[int, ...]]) -> dict[str, int]:
    out = len(layers) - 1
    while out > 0 and isinstance(layers[out], EmbedNormalize):
        out -= 1
    endpoints = {"output": out}
    seen_conv = False
    feature = None
    for i, (spec, shp) in enumerate(zip(layers, shapes)):
        if isinstance(spec, Conv):
            seen_conv = True
        if seen_conv and len(shp) >= 3 and isinstance(spec, (Conv, ReLU)):
            feature = i
    if feature is not None:
        endpoints["features"] = feature
    return endpoints


def init_weights(input_shape: Sequence[int], layers: Sequence[LayerSpec], seed: int) -> list[dict[str, np.ndarray]]:
    """Uniform[-s, s] weights with s = sqrt(1/fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(input_shape, layers)
    in_shapes = [tuple(input_shape)] + shapes[:-1]
    weights = []
    for spec, in_shape in zip(layers, in_shapes):
        params = {}
        for name, shp in param_shapes(spec, in_shape).items():
            if name == "bias":
                params[name] = np.zeros(shp)
            else:
                s = np.sqrt(1.0 / _fan_in(name, shp, spec))
                params[name] = rng.uniform(-s, s, size=shp)
        weights.append(params)
    return weights


def build_model(input_shape: Sequence[int], layers: Sequence[LayerSpec], head: Head,
                seed: int = 0, endpoints: dict[str, int] | None = None) -> NetworkModel:
    layers = list(layers)
    return NetworkModel(tuple(input_shape), layers, init_weights(input_shape, layers, seed), head,
                        dict(endpoints or {}))


PRESETS = ("tiny-cls", "tiny-ret", "tiny-deep", "tiny-rnn")


def preset_layers(name: str, n_classes: int = 4, embed_dim: int = 32,
                  normalize: bool = True, hidden_dim: int = 32) -> tuple[list[LayerSpec], Head]:
    trunk = [Conv(3, 3, 8, 1, 1), ReLU(), Conv(3, 3, 16, 2, 1), ReLU(), Conv(3, 3, 16, 1, 1), ReLU()]
    norm = [EmbedNormalize()] if normalize else []
    if name == "tiny-cls":
        return trunk + [GAP(), Dense(n_classes)], Head("logits", n_classes)
    if name == "tiny-ret":
        return trunk + [GAP(), Dense(embed_dim)] + norm, Head("embedding", embed_dim)
    if name == "tiny-deep":
        deep = [Conv(3, 3, 8, 1, 1), ReLU(), Conv(3, 3, 16, 2, 1), ReLU()]
        for _ in range(6):
            deep += [Conv(3, 3, 16, 1, 1), ReLU()]
        return deep + [GAP(), Dense(n_classes)], Head("logits", n_classes)
    if name == "tiny-rnn":
        rnn_trunk = [Conv(3, 3, 8, 2, 1), ReLU(), Conv(3, 3, 16, 2, 1), ReLU()]
        return (rnn_trunk + [GAP(), RecurrentFuse(hidden_dim), Dense(embed_dim)] + norm,
                Head("embedding", embed_dim))
    raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")


def build_preset(name: str, seed: int = 0, *, image_size: int = 32, channels: int = 3,
                 frames: int = 3, **kwargs) -> NetworkModel:
    layers, head = preset_layers(name, **kwargs)
    input_shape = (image_size, image_size, channels)
    if name == "tiny-rnn":
        input_shape = (frames,) + input_shape
    return build_model(input_shape, layers, head, seed)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def apply_layer(spec: LayerSpec, params: dict[str, Tensor], x: Tensor) -> Tensor:
    if isinstance(spec, Conv):
        return ad.conv2d(x, params["kernel"], params["bias"], spec.stride, spec.padding)
    if isinstance(spec, ReLU):
        return ad.relu(x)
    if isinstance(spec, GAP):
        return ad.global_average_pool(x)
    if isinstance(spec, Flatten):
        return ad.flatten(x, 3)
    if isinstance(spec, Dense):
        return ad.dense(x, params["weight"], params["bias"])
    if isinstance(spec, EmbedNormalize):
        return ad.embed_normalize(x)
    if isinstance(spec, RecurrentFuse):
        h = Tensor(np.zeros(x.shape[:-2] + (spec.hidden_dim,)))
        for t in range(x.shape[-2]):
            h = ad.gated_cell_step(x[..., t, :], h, params["w_input"], params["w_hidden"], params["bias"])
        return h
    raise ShapeError(f"unsupported layer {spec!r}")


def run_layers(model: NetworkModel, x: Tensor, start: int, stop: int,
               params: list[dict[str, Tensor]] | None = None,
               trace: list[np.ndarray] | None = None) -> Tensor:
    """Apply layers ``start .. stop`` (inclusive) to ``x``."""
    if params is None:
        params = model.param_tensors()
    for i in range(start, stop + 1):
        x = apply_layer(model.layers[i], params[i], x)
        if trace is not None:
            trace.append(x.data)
    return x


def check_input(model: NetworkModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = len(model.input_shape)
    if x.ndim < n or tuple(x.shape[x.ndim - n:]) != model.input_shape:
        raise ShapeError(f"input shape {x.shape} does not end with model input shape {model.input_shape}")
    return x


def forward(model: NetworkModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Full forward pass; returns the final output and every layer's output."""
    x = check_input(model, x)
    trace: list[np.ndarray] = []
    out = run_layers(model, Tensor(x), 0, len(model.layers) - 1, trace=trace)
    return out.data, trace


def forward_from(model: NetworkModel, value: np.ndarray, layer: int, stop: int | None = None) -> np.ndarray:
    """Continue a forward pass from the output of ``layer``."""
    stop = len(model.layers) - 1 if stop is None else stop
    return run_layers(model, Tensor(value), layer + 1, stop).data


def filtered_forward(model: NetworkModel, f, *, x: np.ndarray | None = None, V: np.ndarray | None = None,
                     at_layer: int | None = None, stop: int | None = None) -> np.ndarray:
    """FT(x, f): the forward pass with ``f / ||f||`` multiplied into layer ``at_layer``'s output.

    Pass either the raw input ``x`` or the cached activation ``V`` of
    ``at_layer`` (fast path). ``stop`` defaults to the raw output endpoint.
    """
    at_layer = model.feature_layer if at_layer is None else at_layer
    stop = model.output_layer if stop is None else stop
    raw = np.asarray(getattr(f, "raw", f), dtype=np.float64)
    f_hat = ad.l2_normalize(Tensor(raw))
    if (x is None) == (V is None):
        raise ValueError("pass exactly one of x or V")
    if V is None:
        V = run_layers(model, Tensor(check_input(model, x)), 0, at_layer).data
    out = ad.broadcast_spatial_multiply(Tensor(V), f_hat)
    return run_layers(model, out, at_layer + 1, stop).data


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _sgd_step(model: NetworkModel, params: list[dict[str, Tensor]], lr: float) -> None:
    for w, p in zip(model.weights, params):
        for name, t in p.items():
            if t.grad is not None:
                w[name] = w[name] - lr * t.grad


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = ad.log_softmax(logits)
    picked = logp[np.arange(len(labels)), labels]
    return -ad.mean(picked)


def train_classifier(model: NetworkModel, images: np.ndarray, labels: np.ndarray, epochs: int = 20,
                     lr: float = 0.1, seed: int = 0, batch_size: int = 32,
                     history: list | None = None) -> NetworkModel:
    """Mini-batch SGD on softmax cross-entropy. Returns a trained copy."""
    if model.head.kind != "logits":
        raise IncompatibleModelError("train_classifier needs a logits head")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty dataset")
    model = model.copy()
    rng = np.random.default_rng(seed)
    stop = model.output_layer
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            params = model.param_tensors(trainable=True)
            logits = run_layers(model, Tensor(images[idx]), 0, stop, params)
            loss = softmax_cross_entropy(logits, labels[idx])
            loss.backward()
            _sgd_step(model, params, lr)
            total += loss.item() * len(idx)
            count += len(idx)
        logger.info("epoch %d loss %.6f", epoch, total / count)
        if history is not None:
            history.append((epoch, total / count))
    return model


def predict(model: NetworkModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Raw outputs (logits or pre-normalization embeddings) for a batch."""
    images = check_input(model, images)
    outs = [run_layers(model, Tensor(images[s:s + batch_size]), 0, model.output_layer).data
            for s in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


def _retrieval_batch(rng: np.random.Generator, by_class: dict[int, np.ndarray], n_classes: int,
                     per_class: int) -> np.ndarray:
    classes = sorted(by_class)
    chosen = rng.choice(classes, size=min(n_classes, len(classes)), replace=False)
    idx = [rng.choice(by_class[c], size=per_class, replace=len(by_class[c]) < per_class) for c in sorted(chosen)]
    return np.concatenate(idx)


def retrieval_loss(emb: Tensor, labels: np.ndarray, loss_kind: str, margin: float) -> Tensor:
    from . import losses

    if loss_kind == "triplet":
        return losses.batch_triplet_loss(ad.embed_normalize(emb), labels, losses.TripletConfig(margin))
    if loss_kind == "npair":
        return losses.batch_npair_loss(emb, labels)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def train_retrieval(model: NetworkModel, images: np.ndarray, labels: np.ndarray, loss_kind: str = "triplet",
                    epochs: int = 10, lr: float = 0.05, seed: int = 0, per_class: int | None = None,
                    margin: float = 0.2, history: list | None = None) -> NetworkModel:
    """SGD on a ranking loss over class-balanced mini-batches. Returns a trained copy.

    Triplet batches hold ``per_class`` (default 8) samples of every class and
    use unit-normalized embeddings; N-pair batches hold exactly one positive
    pair per class on the raw embedding.
    """
    if model.head.kind != "embedding":
        raise IncompatibleModelError("train_retrieval needs an embedding head")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty dataset")
    by_class = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
    if len(by_class) < 2:
        raise ValueError("retrieval training needs at least two classes")
    if loss_kind == "npair":
        small = [c for c, idx in by_class.items() if len(idx) < 2]
        if small:
            raise ValueError(f"npair batches need two samples per class; classes {small} have fewer")
        per_class = 2
    elif loss_kind == "triplet":
        per_class = per_class or 8
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    model = model.copy()
    rng = np.random.default_rng(seed)
    monitor_rng = np.random.default_rng([seed, 1])
    monitor = _retrieval_batch(monitor_rng, by_class, len(by_class), per_class)
    stop = model.output_layer

    def monitor_loss() -> float:
        emb = run_layers(model, Tensor(images[monitor]), 0, stop)
        return retrieval_loss(emb, labels[monitor], loss_kind, margin).item()

    start_loss = monitor_loss()
    if history is not None:
        history.append((-1, start_loss))
    steps = max(1, len(images) // (per_class * len(by_class)))
    for epoch in range(epochs):
        for _ in range(steps):
            idx = _retrieval_batch(rng, by_class, len(by_class), per_class)
            params = model.param_tensors(trainable=True)
            emb = run_layers(model, Tensor(images[idx]), 0, stop, params)
            loss = retrieval_loss(emb, labels[idx], loss_kind, margin)
            loss.backward()
            _sgd_step(model, params, lr)
        current = monitor_loss()
        logger.info("epoch %d monitor loss %.6f", epoch, current)
        if history is not None:
            history.append((epoch, current))
    return model


# ---------------------------------------------------------------------------
# Sanity-check randomization
# ---------------------------------------------------------------------------

def randomize(model: NetworkModel, scope: str, seed: int) -> NetworkModel:
    """Resample weights from uniform[-0.1, 0.1] for the logits layer or all layers."""
    if scope not in ("logits-layer", "all-layers"):
        raise ValueError(f"scope must be 'logits-layer' or 'all-layers', got {scope!r}")
    if scope == "logits-layer" and model.head.kind != "logits":
        raise IncompatibleModelError("logits-layer randomization needs a logits head")
    out = model.copy()
    rng = np.random.default_rng(seed)
    targets = [model.output_layer] if scope == "logits-layer" else range(len(model.layers))
    for i in targets:
        for name in sorted(out.weights[i]):
            out.weights[i][name] = rng.uniform(-0.1, 0.1, size=out.weights[i][name].shape)
    return out
