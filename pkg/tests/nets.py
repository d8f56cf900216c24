"""Hand-built networks whose optimal filters are known in closed form."""

import numpy as np

from l2caf.network import GAP, Conv, Dense, Flatten, Head, NetworkModel, ReLU, build_model


def identity_conv() -> dict:
    return {"kernel": np.ones((1, 1, 1, 1)), "bias": np.zeros(1)}


def spatial_sum_net(h: int, w: int, scale: float = 1.0) -> NetworkModel:
    """Single channel, output ``scale * sum(A)`` with ``A`` equal to the input."""
    layers = [Conv(1, 1, 1), GAP(), Dense(1)]
    weights = [identity_conv(), {}, {"weight": np.full((1, 1), scale * h * w), "bias": np.zeros(1)}]
    return NetworkModel((h, w, 1), layers, weights, Head("logits", 1))


def sign_flip_net(h: int, w: int) -> NetworkModel:
    """Embedding ``-GAP(A)``: every positive image lands in the negative half-line."""
    layers = [Conv(1, 1, 1), GAP(), Dense(1)]
    weights = [identity_conv(), {}, {"weight": -np.ones((1, 1)), "bias": np.zeros(1)}]
    return NetworkModel((h, w, 1), layers, weights, Head("embedding", 1))


def halves_net(h: int, w: int) -> NetworkModel:
    """Two logits: spatial sums of ``ReLU(A)`` over the left and right column halves.

    The filter sits on the identity conv output (layer 0), before the ReLU.
    """
    layers = [Conv(1, 1, 1), ReLU(), Flatten(), Dense(2)]
    weight = np.zeros((h * w, 2))
    cols = np.tile(np.arange(w), h)
    weight[cols < w // 2, 0] = 1.0
    weight[cols >= w // 2, 1] = 1.0
    weights = [identity_conv(), {}, {}, {"weight": weight, "bias": np.zeros(2)}]
    return NetworkModel((h, w, 1), layers, weights, Head("logits", 2), {"features": 0})


def hot_cell_net(h: int, w: int, cell: tuple[int, int], gain: float = 1.0) -> NetworkModel:
    """Output ``gain * A[cell]``: only one feature-map cell matters."""
    layers = [Conv(1, 1, 1), Flatten(), Dense(1)]
    weight = np.zeros((h * w, 1))
    weight[cell[0] * w + cell[1], 0] = gain
    weights = [identity_conv(), {}, {"weight": weight, "bias": np.zeros(1)}]
    return NetworkModel((h, w, 1), layers, weights, Head("logits", 1))


def gap_dense_net(seed: int, h: int = 8, channels: int = 3, k: int = 6, classes: int = 4) -> NetworkModel:
    """Random conv trunk -> GAP -> Dense logits (CAM-compatible)."""
    layers = [Conv(3, 3, k, 1, 1), ReLU(), Conv(3, 3, k, 1, 1), ReLU(), GAP(), Dense(classes)]
    return build_model((h, h, channels), layers, Head("logits", classes), seed)


def random_toy_net(seed: int, head: str = "logits") -> NetworkModel:
    """A small random net with a nonlinearity after the filter layer."""
    rng = np.random.default_rng(seed)
    h = int(rng.integers(4, 8))
    k = int(rng.integers(2, 5))
    layers = [Conv(3, 3, k, 1, 1), ReLU(), Conv(3, 3, k, 1, 1), ReLU(), GAP(), Dense(5), ReLU(), Dense(3)]
    kind = "logits" if head == "logits" else "embedding"
    model = build_model((h, h, 2), layers, Head(kind, 3), seed)
    for wts in model.weights:
        if "bias" in wts:
            wts["bias"] = rng.uniform(-0.1, 0.1, size=wts["bias"].shape)
    return model
