"""Dense tensors with tape-based reverse-mode differentiation.

Every learnable parameter and activation in the package is a :class:`Tensor`.
Values are stored in the active storage dtype (``float32`` unless a
:func:`precision` block says otherwise); reductions accumulate in ``float64``.

A tape is recorded implicitly while operations run with gradients enabled.
:func:`backward` walks it once, fills ``.grad`` on the leaves and then frees
the graph, so a second call on the same loss is an error.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "TapeError",
    "backward",
    "no_grad",
    "precision",
    "get_dtype",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "concat",
    "l2_normalize",
]

ACC = np.float64

_dtype = np.float32
_grad_enabled = True
_name_counter = itertools.count()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    global _dtype
    prev, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_data(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=_dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A multi-axis float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    # -------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Create the output of an operation and, if needed, link it on the tape."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Register an operation defined outside this module.

    ``backward_fn(grad)`` must return one gradient (or ``None``) per parent.
    """
    return _result(data, parents, backward_fn)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_grad(x: np.ndarray, t: np.ndarray = None) -> np.ndarray:
    x2 = x * x
    if t is None:
        t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere)."""
    x = a.data
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * (x * x)))
    out = 0.5 * x * (1.0 + t)
    return _result(out, (a,), lambda g: (g * _gelu_grad(x, t),))


# ------------------------------------------------------------------ reductions
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=ACC)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(_dtype, copy=True),)

    return _result(out, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


# --------------------------------------------------------------------- shaping
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    shape = a.shape

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in idx)

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


# ---------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    """Batched matrix product with 64-bit accumulation."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad = a.data.astype(ACC, copy=False)
    bd = b.data.astype(ACC, copy=False)
    out = np.matmul(ad, bd)

    def back(g):
        g = g.astype(ACC, copy=False)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _result(out, (a, b), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(ACC)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        g = g.astype(ACC)
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(ACC)
    x = x - x.max(axis=axis, keepdims=True)
    out = x - np.log(np.exp(x).sum(axis=axis, keepdims=True))

    def back(g):
        g = g.astype(ACC)
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), back)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    c = a.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs last axis {c}")
    x = a.data.astype(ACC)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data.astype(ACC)
    out = xhat * gd + bias.data

    def back(g):
        g = g.astype(ACC)
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _result(out, (a, gain, bias), back)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale ``a`` to unit L2 norm along ``axis``."""
    norm = sqrt(sum_(a * a, axis=axis, keepdims=True) + eps)
    return a / norm


# -------------------------------------------------------------------- backward
def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def param_key(t: Tensor) -> str:
    if t.name is None:
        t.name = f"tensor{next(_name_counter)}"
    return t.name


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict:
    """Differentiate the scalar ``loss`` and return ``{name: gradient}``.

    Leaves reachable from ``loss`` get their ``.grad`` set. Parameters passed in
    ``params`` that are not reachable receive an all-zero gradient.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward already ran on this tape")
    loss._consumed = True

    grads_by_id = {id(loss): np.ones(loss.shape, dtype=ACC)}
    order = _topological(loss) if loss.requires_grad else []
    leaves = []
    for node in reversed(order):
        g = grads_by_id.pop(id(node), None)
        if node._backward is None:
            leaves.append((node, g))
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads_by_id:
                grads_by_id[key] = grads_by_id[key] + pg
            else:
                grads_by_id[key] = pg
    for node in order:
        node._parents = ()
        node._backward = None

    result = {}
    for leaf, g in leaves:
        grad = np.zeros(leaf.shape, dtype=leaf.data.dtype) if g is None else \
            np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = grad
        result[param_key(leaf)] = grad
    for p in params or ():
        key = param_key(p)
        if key not in result:
            p.grad = np.zeros(p.shape, dtype=p.data.dtype)
            result[key] = p.grad
    return result
