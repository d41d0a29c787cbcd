"""Dense float tensors with tape-based reverse-mode differentiation.

Every op records a closure that maps the output gradient to operand
gradients.  ``Tensor.backward`` walks the tape in reverse topological order
(fixed by construction order), so gradient accumulation is deterministic.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operands of an op do not conform."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

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

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item (needs a single element)", self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward (implicit grad needs a scalar)", self.shape)
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # drop the tape so intermediates can be freed
                node._backward = None
                node._parents = ()

    # -- operator sugar ---------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce_min(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = req
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), bw)


# -- elementwise unary ----------------------------------------------------------

def power(a, p: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _result(a.data**p, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: _accum(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: _accum(a, g * 0.5 / out))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: _accum(a, g * (1.0 - out * out)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: _accum(a, g * pos))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _result(out, (a,), bw)


# -- reductions -----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _result(np.asarray(out), (a,), lambda g: _accum(a, _expand(g, a.shape, axes, keepdims)))


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _result(np.asarray(out), (a,), lambda g: _accum(a, _expand(g, a.shape, axes, keepdims) / n))


def _reduce_extreme(a: Tensor, axis, keepdims, pick) -> Tensor:
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(pick(flat))
        out = flat[idx]

        def bw(g):
            gg = np.zeros(a.size, dtype=a.data.dtype)
            gg[idx] = g.reshape(-1)[0]
            _accum(a, gg.reshape(a.shape))

        return _result(np.asarray(out).reshape((1,) * a.ndim if keepdims else ()), (a,), bw)
    if not isinstance(axis, int):
        raise ValueError("max/min reduce over a single axis or all axes")
    ax = axis % a.ndim
    idx = np.expand_dims(pick(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)

    def bw(g):
        gg = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gg, idx, gk, axis=ax)
        _accum(a, gg)

    return _result(out if keepdims else np.squeeze(out, ax), (a,), bw)


def reduce_max(a, axis=None, keepdims=False) -> Tensor:
    """Max; the gradient flows to the first maximal element."""
    return _reduce_extreme(as_tensor(a), axis, keepdims, np.argmax)


def reduce_min(a, axis=None, keepdims=False) -> Tensor:
    return _reduce_extreme(as_tensor(a), axis, keepdims, np.argmin)


# -- shape ops ------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _result(out, (a,), lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, tuple(axes))
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: _accum(a, np.transpose(g, inv)))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, idx) -> Tensor:
    """Basic slicing and integer-array indexing (``slice`` in the op suite)."""
    a = as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError as e:
        raise ShapeError(f"slice [{e}]", a.shape) from None
    advanced = _has_advanced(idx)

    def bw(g):
        gg = np.zeros_like(a.data)
        if advanced:
            np.add.at(gg, idx, g)
        else:
            gg[idx] = g
        _accum(a, gg)

    return _result(np.array(out, copy=True) if advanced else out, (a,), bw)


def gather(a, index, axis: int = 0) -> Tensor:
    """Select slices of ``a`` along ``axis`` by integer ``index`` (any shape)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    ax = axis % a.ndim
    if index.size and (index.min() < -a.shape[ax] or index.max() >= a.shape[ax]):
        raise ShapeError("gather (index out of range)", a.shape, index.shape)
    out = np.take(a.data, index, axis=ax)

    def bw(g):
        gg = np.zeros_like(a.data)
        g2 = np.moveaxis(g, list(range(ax, ax + index.ndim)), list(range(index.ndim)))
        g2 = g2.reshape((-1,) + g2.shape[index.ndim:])
        gm = np.moveaxis(gg, ax, 0)
        np.add.at(gm, index.reshape(-1), g2)
        _accum(a, gg)

    return _result(out, (a,), bw)


def scatter_add(src, index, size: int) -> Tensor:
    """Rows of ``src`` summed into ``size`` output rows selected by ``index``.

    Accumulation runs in ascending source-row order.
    """
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or index.shape[0] != src.shape[0]:
        raise ShapeError("scatter_add", src.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ShapeError("scatter_add (index out of range)", src.shape, index.shape)
    out = np.zeros((size,) + src.shape[1:], dtype=src.data.dtype)
    np.add.at(out, index, src.data)
    return _result(out, (src,), lambda g: _accum(src, g[index]))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat (no operands)")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError("concat", *(t.shape for t in ts))
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(int(lo), int(hi))
                _accum(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


# -- composite numerics -------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (a,), lambda g: _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True))))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (a,), lambda g: _accum(a, g - p * g.sum(axis=axis, keepdims=True)))


def layernorm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layernorm", x.shape, weight.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    std = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc / std
    out = xhat * weight.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        if weight.requires_grad:
            _accum(weight, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=lead))
        if x.requires_grad:
            gn = g * weight.data
            _accum(x, (gn - gn.mean(axis=-1, keepdims=True)
                       - xhat * (gn * xhat).mean(axis=-1, keepdims=True)) / std)

    return _result(out, (x, weight, bias), bw)


def cross_entropy(logits, targets, mask) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows selected by ``mask``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or targets.shape != logits.shape[:1] or mask.shape != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape, mask.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: empty loss mask")
    rows = np.flatnonzero(mask)
    tgt = targets[rows]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy (target id out of range)", logits.shape, targets.shape)
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(rows.size), tgt]
    out = np.asarray(nll.sum() / n)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(rows.size), tgt] -= 1.0
        gg = np.zeros_like(logits.data)
        gg[rows] = p * (float(g) / n)
        _accum(logits, gg)

    return _result(out, (logits,), bw)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    return a / sqrt(reduce_sum(a * a, axis=axis, keepdims=True) + eps)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)
