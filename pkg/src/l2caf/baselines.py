"""Gradient-weighted class activation maps and CAM."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import IncompatibleModelError, ShapeError
from .network import GAP, Dense, NetworkModel, check_input, run_layers

SOURCES = ("grad-cam", "grad-cam-abs", "cam", "l2-caf", "softmax-caf", "gaussian-caf")


@dataclass
class SaliencyMap:
    grid: np.ndarray
    source: str

    @property
    def is_zero(self) -> bool:
        return not np.any(self.grid > 0)


def feature_gradients(model: NetworkModel, x: np.ndarray, at_layer: int | None,
                      target: Callable[[Tensor], Tensor]) -> tuple[np.ndarray, np.ndarray]:
    """Feature map ``A`` at ``at_layer`` and the gradient of ``target(output)`` with respect to it."""
    at_layer = model.feature_layer if at_layer is None else at_layer
    if len(model.shapes[at_layer]) != 3:
        raise ShapeError(f"layer {at_layer} output {model.shapes[at_layer]} is not an h x w x k map")
    x = check_input(model, x)
    if x.ndim != len(model.input_shape):
        raise ShapeError("saliency maps are computed one image at a time")
    params = model.param_tensors()
    feats = run_layers(model, Tensor(x), 0, at_layer, params).data
    a = ad.parameter(feats)
    out = run_layers(model, a, at_layer + 1, model.output_layer, params)
    (grad,) = ad.grad(target(out), [a])
    return feats, grad


def channel_weights(grad: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of the gradient (the alpha_k weights)."""
    return grad.mean(axis=(0, 1))


def grad_cam(model: NetworkModel, x: np.ndarray, at_layer: int | None, c: int) -> SaliencyMap:
    """ReLU of the gradient-weighted channel sum for logit ``c``."""
    if model.head.kind != "logits":
        raise IncompatibleModelError("grad_cam needs a logits head; use grad_cam_retrieval for embeddings")
    if not 0 <= c < model.head.size:
        raise ValueError(f"class {c} out of range")
    feats, grad = feature_gradients(model, x, at_layer, lambda out: out[c])
    pre = feats @ channel_weights(grad)
    return SaliencyMap(np.maximum(pre, 0.0), "grad-cam")


def grad_cam_retrieval(model: NetworkModel, x: np.ndarray, at_layer: int | None = None,
                       mode: str = "relu", reduction: str = "sum") -> SaliencyMap:
    """Grad-CAM on an embedding network.

    The backward target is the sum (or mean) of the raw embedding components.
    ``mode="relu"`` is the vanilla map, ``mode="abs"`` keeps negatively
    weighted evidence by taking the absolute value instead.
    """
    if model.head.kind != "embedding":
        raise IncompatibleModelError("grad_cam_retrieval needs an embedding head")
    if mode not in ("relu", "abs"):
        raise ValueError(f"mode must be 'relu' or 'abs', got {mode!r}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    reduce = ad.tsum if reduction == "sum" else ad.mean
    feats, grad = feature_gradients(model, x, at_layer, reduce)
    pre = feats @ channel_weights(grad)
    if mode == "relu":
        return SaliencyMap(np.maximum(pre, 0.0), "grad-cam")
    return SaliencyMap(np.abs(pre), "grad-cam-abs")


def cam_layer(model: NetworkModel) -> int:
    """Index of the feature map feeding GAP -> Dense(logits); raises if the architecture differs."""
    out = model.output_layer
    if (model.head.kind != "logits" or out < 2 or not isinstance(model.layers[out], Dense)
            or not isinstance(model.layers[out - 1], GAP)):
        raise IncompatibleModelError("CAM needs a conv trunk -> GAP -> single Dense logits layer")
    return out - 2


def cam(model: NetworkModel, x: np.ndarray, c: int) -> SaliencyMap:
    """``ReLU(sum_k W[k, c] A[:, :, k])`` from the logits weights."""
    layer = cam_layer(model)
    if not 0 <= c < model.head.size:
        raise ValueError(f"class {c} out of range")
    x = check_input(model, x)
    feats = run_layers(model, Tensor(x), 0, layer).data
    weight = model.weights[model.output_layer]["weight"]
    return SaliencyMap(np.maximum(feats @ weight[:, c], 0.0), "cam")
