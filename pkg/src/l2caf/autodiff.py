"""Dense float64 tensors with a reverse-mode autodiff tape.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node (op tag, parents, backward closure holding the saved
values) so that :meth:`Tensor.backward` can walk the graph in reverse
topological order. Operations on constant tensors record nothing, which keeps
inference cheap.

Spatial tensors use ``(..., rows, cols, channels)`` layout; any leading axes
are treated as batch axes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateFilterError, NonFiniteError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A node of the autodiff tape.

    ``op`` is the operation tag that produced the value, ``parents`` the input
    nodes, and ``grad`` the accumulated gradient after :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), backward: BackwardFn | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by op {op!r}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- backward -------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every node that requires it and is reachable.

        The loss must be a scalar (size-1) tensor.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g
            if node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``wrt``; unreachable inputs get zeros."""
    wrt = list(wrt)
    for t in wrt:
        t.grad = None
    loss.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _node(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, "div", (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _node(a.data ** exponent, "pow", (a,), backward)


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (2.0 * g * a.data,)

    return _node(a.data * a.data, "square", (a,), backward)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def tabs(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _node(out, "mean", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor, n_trailing: int = 3) -> Tensor:
    """Collapse the trailing ``n_trailing`` axes into one."""
    a = as_tensor(a)
    if a.ndim < n_trailing:
        raise ShapeError(f"flatten needs at least {n_trailing} axes, got {a.shape}")
    lead = a.shape[: a.ndim - n_trailing]
    return reshape(a, lead + (int(np.prod(a.shape[a.ndim - n_trailing:])),))


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], "getitem", (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, "stack", tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def gram(x: Tensor) -> Tensor:
    """All pairwise inner products ``x @ x.T`` of the rows of a matrix."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"gram expects a matrix, got {x.shape}")
    return _node(x.data @ x.data.T, "gram", (x,), lambda g: ((g + g.T) @ x.data,))


# ---------------------------------------------------------------------------
# Network ops
# ---------------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x.data @ weight.data
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = parents + (bias,)

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None)
        return grads

    return _node(out, "dense", parents, backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[..., h, w, c_in]`` with ``kernel[kh, kw, c_in, c_out]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if x.ndim < 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects x[..., h, w, c] and 4-d kernel, got {x.shape}, {kernel.shape}")
    kh, kw, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[-1]}, kernel expects {c_in}")
    lead = x.shape[:-3]
    h, w = x.shape[-3], x.shape[-2]
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xb = x.data.reshape((-1, h, w, c_in))
    if padding:
        xb = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    # windows: (n, ho, wo, c_in, kh, kw) -> cols (n*ho*wo, kh*kw*c_in)
    win = sliding_window_view(xb, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * c_in)
    kmat = kernel.data.reshape(kh * kw * c_in, c_out)
    out = cols @ kmat
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = parents + (bias,)
    n = xb.shape[0]
    out = out.reshape(lead + (ho, wo, c_out))

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kernel.shape)
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, c_in)
            dxp = np.zeros((n, hp, wp, c_in))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            if padding:
                dxp = dxp[:, padding:padding + h, padding:padding + w, :]
            gx = dxp.reshape(x.shape)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads

    return _node(out, "conv2d", parents, backward)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of ``x[..., h, w, c]``."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"global_average_pool needs x[..., h, w, c], got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]

    def backward(g):
        return (np.broadcast_to(g[..., None, None, :], x.shape) / (h * w),)

    return _node(x.data.mean(axis=(-3, -2)), "gap", (x,), backward)


def broadcast_spatial_multiply(a: Tensor, f_hat: Tensor) -> Tensor:
    """``out[..., i, j, c] = a[..., i, j, c] * f_hat[..., i, j]`` for every channel."""
    a, f_hat = as_tensor(a), as_tensor(f_hat)
    if a.ndim < 3 or f_hat.ndim < 2 or a.shape[-3:-1] != f_hat.shape[-2:]:
        raise ShapeError(f"filter spatial dims {f_hat.shape[-2:]} do not match feature map {a.shape}")
    fe = f_hat.data[..., None]

    def backward(g):
        ga = g * fe if a.requires_grad else None
        gf = unbroadcast((g * a.data).sum(axis=-1), f_hat.shape) if f_hat.requires_grad else None
        return ga, gf

    return _node(a.data * fe, "spatial_mul", (a, f_hat), backward)


def l2_normalize(v: Tensor) -> Tensor:
    """``v / ||v||_2`` over all elements."""
    v = as_tensor(v)
    norm = float(np.sqrt(np.sum(v.data * v.data)))
    if norm == 0.0:
        raise DegenerateFilterError("cannot normalize a zero-norm tensor")
    out = v.data / norm

    def backward(g):
        return ((g - out * np.sum(out * g)) / norm,)

    return _node(out, "l2_normalize", (v,), backward)


def embed_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise unit normalization over the last axis."""
    x = as_tensor(x)
    norm = np.maximum(np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True)), eps)
    out = x.data / norm

    def backward(g):
        return ((g - out * np.sum(out * g, axis=-1, keepdims=True)) / norm,)

    return _node(out, "embed_normalize", (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _node(out, "softmax", (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, "log_softmax", (x,), backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis."""
    return tsum(mul(a, b), axis=-1)


def squared_l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """``||a - b||^2`` over the last axis."""
    return tsum(square(sub(a, b)), axis=-1)


def gated_cell_step(x: Tensor, h: Tensor, w_input: Tensor, w_hidden: Tensor,
                    bias: Tensor) -> Tensor:
    """One step of the minimal gated recurrent cell.

    ``z = x W_in + h W_hid + b`` is split into an input gate ``i`` and a
    candidate ``c``; the new state is ``h + sigmoid(i) * (tanh(c) - h)``.
    """
    hidden = h.shape[-1]
    z = add(dense(x, w_input, bias), dense(h, w_hidden))
    gate = sigmoid(z[..., :hidden])
    cand = tanh(z[..., hidden:])
    return add(h, mul(gate, sub(cand, h)))


def numerical_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return out
