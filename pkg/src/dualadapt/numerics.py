"""Dense float64 tensors with a small reverse-mode gradient tape.

Tensors are immutable wrappers around numpy arrays. An operation whose
inputs include a tensor with ``requires_grad=True`` records a node on the
tape: its parents, a backward closure and a monotonically increasing index.
:func:`grad` replays the recorded nodes in reverse index order, which is a
valid reverse topological order because a node is always created after its
parents.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_tape_index = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable n-d array of float64 values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_index")
    # make `ndarray <op> Tensor` dispatch to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._index = next(_tape_index)

    @classmethod
    def _result(cls, arr: np.ndarray, parents: Iterable["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        _check_finite(arr)
        arr.flags.writeable = False
        out.data = arr
        parents = tuple(parents)
        tracked = any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = parents if tracked else ()
        out._backward = backward if tracked else None
        out._index = next(_tape_index)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(arr: np.ndarray) -> None:
    if arr.size and not np.isfinite(arr).all():
        raise FloatingPointError("non-finite value produced")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    av, bv = a.data, b.data
    return Tensor._result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sa, sb = a.shape, b.shape
    return Tensor._result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sa, sb = a.shape, b.shape
    return Tensor._result(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    try:
        out = av * bv
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._result(
        out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return Tensor._result(y, (a,), lambda g: (g * (1.0 - y * y),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size and a.data.min() <= 0:
        raise ContractError("log of a non-positive value")
    av = a.data
    return Tensor._result(np.log(av), (a,), lambda g: (g / av,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Elementwise |a|; the subgradient at exactly zero is taken as 0."""
    a = as_tensor(a)
    s = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * s,))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(a.data.sum(axis=axis), (a,), backward)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise ContractError("mean over an empty axis")
    return mul(sum(a, axis=axis), 1.0 / count)


def softmax(logits) -> Tensor:
    """Row-wise softmax over the last axis, stabilised by subtracting the row max."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects [batch, C], got {logits.shape}")
    if logits.shape[1] < 2:
        raise ShapeError("softmax needs at least two classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True) if logits.shape[0] else logits.data
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._result(s, (logits,), backward)


def detach(a) -> Tensor:
    """Same value, cut from the tape (stop-gradient)."""
    a = as_tensor(a)
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._index = next(_tape_index)
    return out


def grad_reverse(a) -> Tensor:
    """Identity forward, negated gradient backward."""
    a = as_tensor(a)
    return Tensor._result(a.data, (a,), lambda g: (-g,))


def grad(objective: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(objective)/d(p) for each p in ``params``.

    Parameters that did not take part in computing ``objective`` get an
    all-zero gradient.
    """
    if not isinstance(objective, Tensor):
        raise ContractError("objective must be a Tensor")
    if objective.data.size != 1:
        raise ContractError(f"objective must be scalar, got shape {objective.shape}")
    grads: dict[int, np.ndarray] = {}
    if objective.requires_grad:
        nodes: dict[int, Tensor] = {}
        stack = [objective]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        grads[id(objective)] = np.ones_like(objective.data)
        for t in sorted(nodes.values(), key=lambda n: n._index, reverse=True):
            g = grads.get(id(t))
            if g is None or t._backward is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    return [grads.get(id(p), np.zeros_like(p.data)).copy() for p in params]
