"""Dense-tensor numerics with reverse-mode differentiation on numpy arrays.

A tape of (parents, backward) links built op by op; backward() walks it in
reverse topological order. Double precision is used in gradient tests, single
precision in training; ops never change the dtype they are given.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

# ---------------------------------------------------------------- tape core

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording inside the block."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """N-d array with an optional grad buffer and a link into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar root over the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar root, got shape %r" % (self.shape,))
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar; constants (python numbers, numpy arrays) stay grad-free
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axis1: int, axis2: int):
        return transpose(self, axis1, axis2)

    def __repr__(self):
        return "Tensor(shape=%r, dtype=%s, requires_grad=%r)" % (
            self.shape, self.dtype, self.requires_grad)


class Parameter(Tensor):
    """Named leaf tensor; grad preallocated so unused parameters report exact zeros."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return "Parameter(%r, shape=%r)" % (self.name, self.shape)


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result; backward(g) must return per-parent grads (None to skip)."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` across the axes numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def _as_const(x, like: Tensor) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=like.dtype)


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return from_op(a.data + b.data, (a, b), bwd)
    c = _as_const(b, a)

    def bwd(g):
        return (_unbroadcast(g, a.shape),)
    return from_op(a.data + c, (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        def bwd(g):
            return (_unbroadcast(g * b.data, a.shape),
                    _unbroadcast(g * a.data, b.shape))
        return from_op(a.data * b.data, (a, b), bwd)
    c = _as_const(b, a)

    def bwd(g):
        return (_unbroadcast(g * c, a.shape),)
    return from_op(a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError("matmul inner dims disagree: %r @ %r" % (a.shape, b.shape))
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb
    return from_op(out, (a, b), bwd)


def transpose(x: Tensor, axis1: int, axis2: int) -> Tensor:
    def bwd(g):
        return (g.swapaxes(axis1, axis2),)
    return from_op(x.data.swapaxes(axis1, axis2), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape

    def bwd(g):
        return (g.reshape(old),)
    return from_op(np.ascontiguousarray(x.data).reshape(shape), (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, size: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)
    return from_op(np.ascontiguousarray(x.data[idx]), (x,), bwd)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ValueError("split sizes %r do not cover axis %d of %r" % (sizes, axis, x.shape))
    out, start = [], 0
    for n in sizes:
        out.append(narrow(x, axis, start, n))
        start += n
    return out


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
    return from_op(np.asarray(x.data.sum()), (x,), bwd)


# ---------------------------------------------------------------- nonlinear ops

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        # Jacobian: diag(y) - y y^T applied row-wise
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)
    return from_op(y, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * sig

    def bwd(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)
    return from_op(y, (x,), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    # x [..., d], gain [d]
    n = x.shape[-1]
    s = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    y = x.data * s * gain.data

    def bwd(g):
        gy = g * gain.data
        dx = gy * s - x.data * (s ** 3 / n) * (gy * x.data).sum(axis=-1, keepdims=True)
        dgain = _unbroadcast(g * x.data * s, gain.shape)
        return dx, dgain
    return from_op(y, (x, gain), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean NLL of targets under softmax(logits); logits [N, V], targets int [N]."""
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects 2-d logits, got %r" % (logits.shape,))
    t = np.asarray(targets)
    n, v = logits.shape
    if t.shape != (n,):
        raise ValueError("targets shape %r does not match logits rows %d" % (t.shape, n))
    if t.min() < 0 or t.max() >= v:
        raise IndexError("target id out of range [0, %d)" % v)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    loss = (lse - z[np.arange(n), t]).mean()

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return (p * (g / n),)
    return from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: table [R, d], ids int [...] -> [..., d]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range [0, %d)" % table.shape[0])
    out = table.data[ids]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)
    return from_op(out, (table,), bwd)


# ---------------------------------------------------------------- inference helper

def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a [m, k] @ b [k, n] with one independent [1, k] core per row.

    Rows are fed to the stacked-matmul gufunc as separate stack entries,
    never as rows of one gemm call, so a row's bits depend only on its own
    data: any sub-batch, m = 1 included, reproduces the row exactly. The
    decoding engine relies on this for joint-vs-separate and
    cached-vs-recomputed bit equality; plain gemm does not have the property.
    """
    return np.matmul(a[:, None, :], b[None])[:, 0]
