"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op accepts plain ``np.ndarray``/float inputs as well as :class:`Tensor`
inputs. When none of the inputs is a ``Tensor`` the op returns a plain array,
so geometry and loss code is written once and used both for exact float
evaluation and for gradient computation.

Piecewise ops (``clip``, ``relu``, ``where`` ...) report which branch each
element took to an optional :class:`BranchRecorder`. The gradient checker uses
this to skip scalars whose finite-difference stencil straddles a kink.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "BranchRecorder",
    "record_branches",
    "as_array",
    "is_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "square",
    "tanh",
    "sinhc",
    "acosh",
    "acos",
    "asin",
    "clip",
    "relu",
    "where",
    "norm",
    "logsumexp",
    "concat",
    "take",
    "expand_dims",
    "backward",
]


class Tensor:
    """A float64 array node in a dynamically recorded computation graph."""

    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor | None, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def backward(self) -> None:
        backward(self)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def as_array(x) -> np.ndarray:
    """Return the raw float64 data of ``x`` (Tensor or array-like)."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _node(data, parents: Iterable, backward_fn) -> Tensor | np.ndarray:
    # leaves created with requires_grad=False behave as constants
    parents = tuple(p if isinstance(p, Tensor) and p.requires_grad else None for p in parents)
    if all(p is None for p in parents):
        return data
    out = Tensor(data)
    out._parents = parents
    out._backward = backward_fn
    out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# branch recording --------------------------------------------------------


class BranchRecorder:
    """Collects the per-element branch masks of piecewise ops in call order."""

    def __init__(self) -> None:
        self.masks: list[np.ndarray] = []

    def signature(self) -> tuple[bytes, ...]:
        return tuple(np.packbits(m.ravel()).tobytes() + bytes([m.size % 8]) for m in self.masks)


_RECORDER: list[BranchRecorder] = []


@contextlib.contextmanager
def record_branches():
    rec = BranchRecorder()
    _RECORDER.append(rec)
    try:
        yield rec
    finally:
        _RECORDER.pop()


def _record(*masks: np.ndarray) -> None:
    if _RECORDER:
        for m in masks:
            _RECORDER[-1].masks.append(np.asarray(m, dtype=bool).copy())


# elementwise arithmetic -------------------------------------------------


def add(a, b):
    ad, bd = as_array(a), as_array(b)
    return _node(
        ad + bd,
        (a, b),
        lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)),
    )


def sub(a, b):
    ad, bd = as_array(a), as_array(b)
    return _node(
        ad - bd,
        (a, b),
        lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)),
    )


def mul(a, b):
    ad, bd = as_array(a), as_array(b)
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    ad, bd = as_array(a), as_array(b)
    out = ad / bd
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a):
    return _node(-as_array(a), (a,), lambda g: (-g,))


def square(a):
    ad = as_array(a)
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def matmul(a, b):
    ad, bd = as_array(a), as_array(b)

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if bd.ndim > 1 else np.multiply.outer(g, bd)
        if ad.ndim > 1:
            gb = np.swapaxes(ad, -1, -2) @ g
        else:
            gb = np.multiply.outer(ad, g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), back)


def transpose(a):
    return _node(as_array(a).T, (a,), lambda g: (g.T,))


# reductions -------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    ad = as_array(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ad.shape).copy(),)

    return _node(ad.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims: bool = False):
    ad = as_array(a)
    n = ad.size if axis is None else ad.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis: int = -1):
    """Numerically stable ``log(sum(exp(a), axis))``; the max shift is a constant."""
    ad = as_array(a)
    m = ad.max(axis=axis, keepdims=True)
    e = np.exp(ad - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def back(g):
        return (np.expand_dims(g, axis) * e / s,)

    return _node(out, (a,), back)


def norm(a, axis: int = -1, keepdims: bool = False):
    """Euclidean norm; the gradient at an exactly zero vector is taken as zero."""
    ad = as_array(a)
    r = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(r > 0, r, 1.0)
        return (np.where(r > 0, g * ad / safe, 0.0),)

    return _node(r if keepdims else r.squeeze(axis), (a,), back)


# unary functions --------------------------------------------------------


def exp(a):
    out = np.exp(as_array(a))
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    ad = as_array(a)
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(as_array(a))
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(as_array(a))
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


_SINHC_SERIES = 1e-4
# the derivative (z cosh z - sinh z) / z^2 cancels badly well above 1e-4
_SINHC_GRAD_SERIES = 0.1


def sinhc(a):
    """``sinh(z)/z`` with its removable singularity filled by the Taylor series."""
    z = as_array(a)
    small = np.abs(z) < _SINHC_SERIES
    zs = np.where(small, 1.0, z)
    z2 = z * z
    out = np.where(small, 1.0 + z2 / 6.0 + z2 * z2 / 120.0, np.sinh(zs) / zs)

    def back(g):
        near = np.abs(z) < _SINHC_GRAD_SERIES
        zb = np.where(near, 1.0, z)
        d_big = (zb * np.cosh(zb) - np.sinh(zb)) / (zb * zb)
        d_small = z * (1 / 3 + z2 * (1 / 30 + z2 * (1 / 840 + z2 * (1 / 45360 + z2 / 3991680))))
        return (g * np.where(near, d_small, d_big),)

    return _node(out, (a,), back)


def acosh(a):
    """Inverse hyperbolic cosine; derivative taken as zero at the branch point 1."""
    ad = as_array(a)
    inside = ad > 1.0
    safe = np.where(inside, ad, 2.0)
    return _node(
        np.arccosh(ad),
        (a,),
        lambda g: (np.where(inside, g / np.sqrt(safe * safe - 1.0), 0.0),),
    )


def acos(a):
    """Inverse cosine; derivative taken as zero at the endpoints -1 and 1."""
    ad = as_array(a)
    inside = np.abs(ad) < 1.0
    safe = np.where(inside, ad, 0.0)
    return _node(
        np.arccos(ad),
        (a,),
        lambda g: (np.where(inside, -g / np.sqrt(1.0 - safe * safe), 0.0),),
    )


def asin(a):
    ad = as_array(a)
    inside = np.abs(ad) < 1.0
    safe = np.where(inside, ad, 0.0)
    return _node(
        np.arcsin(ad),
        (a,),
        lambda g: (np.where(inside, g / np.sqrt(1.0 - safe * safe), 0.0),),
    )


# piecewise ops ----------------------------------------------------------


def clip(a, lo=None, hi=None):
    """Clamp to ``[lo, hi]``; zero gradient wherever the clamp is active."""
    ad = as_array(a)
    active = np.zeros(ad.shape, dtype=bool)
    if lo is not None:
        active |= ad < lo
    if hi is not None:
        active |= ad > hi
    _record(active)
    out = np.clip(ad, lo, hi) if (lo is not None or hi is not None) else ad.copy()
    return _node(out, (a,), lambda g: (np.where(active, 0.0, g),))


def relu(a):
    ad = as_array(a)
    pos = ad > 0
    _record(pos)
    return _node(np.where(pos, ad, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),))


def where(mask, a, b):
    """Select ``a`` where ``mask`` else ``b``; the mask carries no gradient."""
    mask = np.asarray(mask, dtype=bool)
    _record(mask)
    ad, bd = as_array(a), as_array(b)
    out = np.where(mask, ad, bd)

    def back(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), ad.shape),
            _unbroadcast(np.where(mask, 0.0, g), bd.shape),
        )

    return _node(out, (a, b), back)


# structural ops ---------------------------------------------------------


def concat(parts: Sequence, axis: int = -1):
    arrays = [as_array(p) for p in parts]
    out = np.concatenate(arrays, axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, parts, back)


def expand_dims(a, axis: int):
    ad = as_array(a)
    return _node(np.expand_dims(ad, axis), (a,), lambda g: (g.reshape(ad.shape),))


def reshape(a, shape):
    ad = as_array(a)
    return _node(ad.reshape(shape), (a,), lambda g: (g.reshape(ad.shape),))


def take(a, idx):
    ad = as_array(a)

    def back(g):
        full = np.zeros_like(ad)
        np.add.at(full, idx, g)
        return (full,)

    return _node(ad[idx], (a,), back)


# backward pass ----------------------------------------------------------


def backward(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf Tensor."""
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
            if p is not None and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)
    }
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if p is None or pg is None:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
