"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation that sees at least one input with
``requires_grad`` records a :class:`Node` on the output tensor. Nodes carry a
monotonically increasing sequence number, so the implicit tape is the set of
nodes reachable from the loss ordered by creation. :func:`backward` replays
that tape in strict reverse creation order, visiting each node once.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, UsageError

_seq = itertools.count()
_grad_enabled = True

DEFAULT_DTYPE = np.float32


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One recorded operation: its inputs and the vector-Jacobian product."""

    __slots__ = ("op", "parents", "vjp", "seq")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.seq = next(_seq)


class Tensor:
    """A numpy array plus an optional gradient slot and graph node."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, label: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{label} contains NaN or Inf")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def make_result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap ``data`` and record a node if any parent needs a gradient.

    ``vjp(g)`` must return one array (or None) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), vjp)
    return out


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into existing buffers, so calling twice without
    resetting doubles them.
    """
    if grad is None:
        if loss.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise UsageError("loss does not require grad; was it built under no_grad()?")
    if loss.node is None:
        loss.grad = grad.copy() if loss.grad is None else loss.grad + grad
        return

    # collect the reachable sub-tape
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t.node.parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t.node.seq, reverse=True)

    pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for t in order:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        parent_grads = t.node.vjp(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------

def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Element-wise product with numpy broadcasting (covers broadcast_mul)."""
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                                  unbroadcast(g * ad, bd.shape) if b.requires_grad else None),
                       "mul")


broadcast_mul = mul


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b),
                       lambda g: (unbroadcast(g / bd, ad.shape),
                                  unbroadcast(-g * out / bd, bd.shape)), "div")


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s_ = a.dtype.type(s)
    return make_result(a.data * s_, (a,), lambda g: (g * s_,), "scalar_mul")


def abs_(a: Tensor) -> Tensor:
    """|a| with subgradient 0 at 0."""
    sign = np.sign(a.data)
    return make_result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d.astype(out.dtype),)

    return make_result(out, (a,), vjp, "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_result(out, (a,), vjp, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), vjp, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), vjp, "log_softmax")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_back(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return make_result(np.asarray(out), (a,),
                       lambda g: (_expand_back(g, shape, axes, keepdims).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    n = int(np.prod([shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    scale = a.dtype.type(1.0 / n)
    return make_result(np.asarray(out), (a,),
                       lambda g: (_expand_back(g * scale, shape, axes, keepdims).copy(),), "mean")


mean_over_axes = mean


def std(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation (divide by n); gradient 0 where std is 0."""
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    n = int(np.prod([shape[i] for i in axes]))
    x = a.data
    centered = x - x.mean(axis=axes, keepdims=True)
    s = np.sqrt((centered * centered).mean(axis=axes, keepdims=True))

    def vjp(g):
        g = g if keepdims else np.expand_dims(g, axes)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(s > 0, centered / (n * s), 0.0)
        return ((g * d).astype(x.dtype),)

    out = s if keepdims else np.squeeze(s, axis=axes)
    return make_result(out, (a,), vjp, "std")


std_over_axes = std


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {orig} as {shape}") from None
    return make_result(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (g.transpose(inv),), "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat on axis {axis}: shapes {ref} and {t.shape} differ")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return make_result(out, tuple(tensors),
                       lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


concat_over_axis = concat


def split(a: Tensor, parts: int, axis: int = 0) -> list:
    """Split into ``parts`` equal pieces along ``axis``."""
    ax = axis % a.ndim
    n = a.shape[ax]
    if parts <= 0 or n % parts:
        raise DimensionError(f"split: extent {n} of axis {axis} not divisible into {parts} parts")
    step = n // parts
    outs = []
    for i in range(parts):
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(i * step, (i + 1) * step)
        sl = tuple(sl)

        def vjp(g, sl=sl):
            full = np.zeros(a.shape, dtype=g.dtype)
            full[sl] = g
            return (full,)

        outs.append(make_result(a.data[sl].copy(), (a,), vjp, "split"))
    return outs


split_equal_over_axis = split


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), vjp, "matmul")


def stack_mean(tensors: Iterable[Tensor]) -> Tensor:
    """Stack along a new leading axis and average it away."""
    tensors = [reshape(t, (1,) + t.shape) for t in tensors]
    return mean(concat(tensors, axis=0), axis=0)
