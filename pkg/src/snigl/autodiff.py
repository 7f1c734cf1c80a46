"""A small reverse-mode tape over numpy float64 arrays.

The model, risk terms, and optimizer in this package need exact gradients at
double precision, checkable against central finite differences.  This module
provides just the operations the package uses: elementwise arithmetic with
broadcasting, matrix products, gather/scatter for message passing over
packed edge lists, segment reductions for graph readouts, and numerically
stable sigmoid / log-softmax primitives.

Usage is functional: wrap arrays in :class:`Var` leaves, compose, call
:func:`backward` on a scalar root, then read ``.grad`` off the leaves.
Values are computed eagerly; ``backward`` replays the tape once in reverse
topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InputValidationError

Array = np.ndarray


def _as_array(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Var:
    """One tape node: a value, its parents, and a backward rule."""

    __slots__ = ("value", "parents", "backward_fn", "grad")

    def __init__(
        self,
        value,
        parents: tuple["Var", ...] = (),
        backward_fn: Callable[[Array], tuple[Array, ...]] | None = None,
    ):
        self.value = _as_array(value)
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, as_var(other))

    def __radd__(self, other):
        return add(as_var(other), self)

    def __sub__(self, other):
        return sub(self, as_var(other))

    def __rsub__(self, other):
        return sub(as_var(other), self)

    def __mul__(self, other):
        return mul(self, as_var(other))

    def __rmul__(self, other):
        return mul(as_var(other), self)

    def __truediv__(self, other):
        return div(self, as_var(other))

    def __rtruediv__(self, other):
        return div(as_var(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_var(other))


def as_var(value) -> Var:
    return value if isinstance(value, Var) else Var(value)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    out = a.value + b.value
    return Var(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Var, b: Var) -> Var:
    out = a.value - b.value
    return Var(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Var, b: Var) -> Var:
    out = a.value * b.value
    return Var(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a: Var, b: Var) -> Var:
    out = a.value / b.value
    return Var(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value**2), b.shape),
        ),
    )


def neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda g: (-g,))


def power(a: Var, exponent: float) -> Var:
    out = a.value**exponent
    return Var(out, (a,), lambda g: (g * exponent * a.value ** (exponent - 1),))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return Var(out, (a,), lambda g: (g * (1.0 - out**2),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return Var(a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Var) -> Var:
    x = a.value
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Var(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip_lower(a: Var, lo: float) -> Var:
    """Clamp below; gradient passes only where unclamped."""
    mask = a.value > lo
    out = np.maximum(a.value, lo)
    return Var(out, (a,), lambda g: (g * mask,))


def clip(a: Var, lo: float, hi: float) -> Var:
    mask = (a.value > lo) & (a.value < hi)
    out = np.clip(a.value, lo, hi)
    return Var(out, (a,), lambda g: (g * mask,))


def detach(a: Var) -> Var:
    return Var(a.value.copy())


# ---------------------------------------------------------------------------
# Linear algebra and shaping
# ---------------------------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    out = a.value @ b.value
    return Var(out, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a: Var) -> Var:
    return Var(a.value.T, (a,), lambda g: (g.T,))


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    old = a.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat0(parts: Sequence[Var]) -> Var:
    parts = list(parts)
    sizes = [p.shape[0] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=0)

    def bwd(g):
        grads = []
        at = 0
        for s in sizes:
            grads.append(g[at : at + s])
            at += s
        return tuple(grads)

    return Var(out, tuple(parts), bwd)


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Var(out, (a,), bwd)


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    count = a.value.size if axis is None else a.value.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def take_rows(a: Var, idx: np.ndarray) -> Var:
    """Gather rows (axis 0); duplicate indices accumulate in the backward."""
    idx = np.asarray(idx, dtype=np.int64)
    out = a.value[idx]

    def bwd(g):
        grad = np.zeros_like(a.value)
        np.add.at(grad, idx, g)
        return (grad,)

    return Var(out, (a,), bwd)


def take_per_row(a: Var, cols: np.ndarray) -> Var:
    """``out[i] = a[i, cols[i]]`` for a 2-d input."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out = a.value[rows, cols]

    def bwd(g):
        grad = np.zeros_like(a.value)
        grad[rows, cols] = g
        return (grad,)

    return Var(out, (a,), bwd)


def segment_sum(a: Var, segments: np.ndarray, num_segments: int) -> Var:
    """Row-wise scatter-add: ``out[s] = sum of rows with segments == s``."""
    segments = np.asarray(segments, dtype=np.int64)
    out = np.zeros((num_segments,) + a.value.shape[1:], dtype=np.float64)
    np.add.at(out, segments, a.value)
    return Var(out, (a,), lambda g: (g[segments],))


def segment_mean(a: Var, segments: np.ndarray, num_segments: int) -> Var:
    counts = np.bincount(np.asarray(segments), minlength=num_segments).astype(np.float64)
    counts = np.maximum(counts, 1.0).reshape((num_segments,) + (1,) * (a.value.ndim - 1))
    return segment_sum(a, segments, num_segments) * Var(1.0 / counts)


def segment_max(a: Var, segments: np.ndarray, num_segments: int) -> Var:
    """Row-wise segment maximum; the argmax entry takes the gradient."""
    segments = np.asarray(segments, dtype=np.int64)
    out = np.full((num_segments,) + a.value.shape[1:], -np.inf)
    np.maximum.at(out, segments, a.value)
    winners = a.value == out[segments]
    # Break ties: only the first row of each (segment, column) tie wins.
    cum = np.zeros_like(winners, dtype=np.int64)
    seen = np.zeros((num_segments,) + a.value.shape[1:], dtype=np.int64)
    for i in range(a.value.shape[0]):  # row count is small in practice
        w = winners[i] & (seen[segments[i]] == 0)
        seen[segments[i]] |= w
        cum[i] = w
    mask = cum.astype(bool)

    def bwd(g):
        grad = np.zeros_like(a.value)
        grad[mask] = np.broadcast_to(g[segments], a.value.shape)[mask]
        return (grad,)

    return Var(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def log_softmax(a: Var, axis: int = -1) -> Var:
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Var(out, (a,), bwd)


def softmax(a: Var, axis: int = -1) -> Var:
    return exp(log_softmax(a, axis=axis))


def logsumexp(a: Var, axis: int = -1, keepdims: bool = False) -> Var:
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    soft = np.exp(x - out)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bwd(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Var(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar ``root`` into every tape node."""
    if root.value.shape != ():
        raise InputValidationError(f"backward needs a scalar root, got shape {root.value.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for parent, grad in zip(node.parents, node.backward_fn(node.grad)):
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + grad
