"""Reverse-mode autodiff over dense float64 numpy arrays.

Only the primitives the two GAN testbeds need are provided: affine and
conv layers, a handful of activations, and the reductions used by the
adversarial losses. Every op output is checked for NaN/Inf on creation.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


_BRANCH_TRACE: list[np.ndarray] | None = None


@contextlib.contextmanager
def trace_branches():
    """Record which side of each piecewise op's kink every element fell on.

    Finite-difference checks use this to discard probes that cross a kink.
    """
    global _BRANCH_TRACE
    prev = _BRANCH_TRACE
    _BRANCH_TRACE = trace = []
    try:
        yield trace
    finally:
        _BRANCH_TRACE = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Non-leaf tensors remember their parents and a closure mapping the
    output gradient to one gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"dimensions must be positive, got {arr.shape}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, shape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        arr = np.broadcast_to(arr, shape)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after all of its inputs."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf with requires_grad.

    The recorded graph is released afterwards.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.shape)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.shape)
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if (ad <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    if _BRANCH_TRACE is not None:
        _BRANCH_TRACE.append(inside)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    ad = a.data
    factor = np.where(ad > 0, 1.0, slope)
    if _BRANCH_TRACE is not None:
        _BRANCH_TRACE.append(ad > 0)
    return _make(ad * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    e = np.exp(-np.abs(ad))
    out = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# reductions / shape ----------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),), "reshape")


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of a B×C×H×W tensor."""
    if a.data.ndim != 4:
        raise ShapeError("upsample_nearest expects B×C×H×W")
    out = a.data.repeat(factor, axis=2).repeat(factor, axis=3)
    B, C, H, W = a.shape

    def bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _make(out, (a,), bw, "upsample")


def row_scale(w: Tensor, m: Tensor) -> Tensor:
    """Scale each output slice ``w[o]`` by ``1 + m[o]``."""
    if m.data.ndim != 1 or m.shape[0] != w.shape[0]:
        raise ShapeError(f"row_scale: {w.shape} vs {m.shape}")
    expand = (slice(None),) + (None,) * (w.data.ndim - 1)
    factor = (1.0 + m.data)[expand]
    wd = w.data
    red = tuple(range(1, wd.ndim))

    def bw(g):
        gm = (g * wd).sum(axis=red) if red else g * wd
        return g * factor, gm

    return _make(wd * factor, (w, m), bw, "row_scale")


# layers ----------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape B×I and weight O×I."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError("dense expects B×I input, O×I weight, O bias")
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ShapeError(f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make(out, (x, weight, bias), bw, "dense")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation of B×C×H×W input with O×C×k×k kernels."""
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError("conv2d expects B×C×H×W input and O×C×k×k kernels")
    B, C, H, W = x.shape
    O, Ck, k, k2 = kernels.shape
    if Ck != C or k != k2 or bias.shape != (O,):
        raise ShapeError(f"conv2d: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    if k % 2 == 0:
        raise ShapeError("conv2d kernel size must be odd")
    if padding < 0:
        raise ShapeError("padding must be non-negative")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if k > Hp or k > Wp:
        raise ShapeError(f"kernel {k} larger than padded input {Hp}×{Wp}")
    Ho, Wo = Hp - k + 1, Wp - k + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    kd = kernels.data
    out = np.einsum("bchwij,ocij->bohw", cols, kd, optimize=True) + bias.data[None, :, None, None]

    def bw(g):
        gk = np.einsum("bohw,bchwij->ocij", g, cols, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + Ho, j:j + Wo] += np.einsum("bohw,oc->bchw", g, kd[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        return gx, gk, gb

    return _make(out, (x, kernels, bias), bw, "conv2d")


def forward_dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return dense(x, weight, bias)


def forward_conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    return conv2d(x, kernels, bias, padding)
