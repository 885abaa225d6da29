"""Reverse-mode automatic differentiation over numpy arrays.

A tiny tape: each `Var` holds a float64 array, its parents, and a closure
that routes the adjoint to those parents.  `backward` seeds a scalar root
with 1 and walks the graph once in reverse topological order.  The
primitive set is exactly what the variational NLL objective needs
(elementwise arithmetic with broadcasting, matmul, transpose, exp, log,
axis sums, a constant-threshold maximum, and a positive-definite inverse
whose adjoint is -B g B).
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.typing import NDArray

from . import linalg
from .errors import ShapeError

__all__ = ["Var", "backward", "constant", "maximum", "posdef_inverse"]


def _unbroadcast(grad: NDArray[np.float64], shape: tuple[int, ...]) -> NDArray[np.float64]:
    """Sum an adjoint back down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """One tape node: a value, accumulated adjoint, and parent links."""

    __slots__ = ("value", "grad", "_parents", "_push")

    def __init__(
        self,
        value,
        parents: tuple["Var", ...] = (),
        push: Callable[[NDArray[np.float64]], None] | None = None,
    ) -> None:
        self.value = np.asarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)
        self._parents = parents
        self._push = push

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        other = constant(other) if not isinstance(other, Var) else other
        out = Var(self.value + other.value, (self, other))

        def push(g):
            self.grad += _unbroadcast(g, self.value.shape)
            other.grad += _unbroadcast(g, other.value.shape)

        out._push = push
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Var(-self.value, (self,))

        def push(g):
            self.grad += -g

        out._push = push
        return out

    def __sub__(self, other):
        other = constant(other) if not isinstance(other, Var) else other
        return self + (-other)

    def __rsub__(self, other):
        return constant(other) + (-self)

    def __mul__(self, other):
        other = constant(other) if not isinstance(other, Var) else other
        out = Var(self.value * other.value, (self, other))

        def push(g):
            self.grad += _unbroadcast(g * other.value, self.value.shape)
            other.grad += _unbroadcast(g * self.value, other.value.shape)

        out._push = push
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = constant(other) if not isinstance(other, Var) else other
        out = Var(self.value / other.value, (self, other))

        def push(g):
            self.grad += _unbroadcast(g / other.value, self.value.shape)
            other.grad += _unbroadcast(-g * self.value / other.value**2, other.value.shape)

        out._push = push
        return out

    def __rtruediv__(self, other):
        return constant(other) / self

    def __matmul__(self, other):
        other = constant(other) if not isinstance(other, Var) else other
        if self.value.ndim != 2 or other.value.ndim != 2:
            raise ShapeError("matmul nodes must be 2-D")
        out = Var(self.value @ other.value, (self, other))

        def push(g):
            self.grad += g @ other.value.T
            other.grad += self.value.T @ g

        out._push = push
        return out

    @property
    def T(self):
        out = Var(self.value.T, (self,))

        def push(g):
            self.grad += g.T

        out._push = push
        return out

    def exp(self):
        val = np.exp(self.value)
        out = Var(val, (self,))

        def push(g):
            self.grad += g * val

        out._push = push
        return out

    def log(self):
        out = Var(np.log(self.value), (self,))

        def push(g):
            self.grad += g / self.value

        out._push = push
        return out

    def sum(self, axis: int | None = None):
        out = Var(self.value.sum(axis=axis), (self,))

        def push(g):
            if axis is None:
                self.grad += np.broadcast_to(g, self.value.shape)
            else:
                self.grad += np.expand_dims(g, axis)

        out._push = push
        return out


def constant(value) -> Var:
    """A leaf node that accumulates (and discards) its adjoint."""
    return Var(value)


def maximum(x: Var, threshold: float) -> Var:
    """Elementwise max(x, threshold) for a scalar constant threshold.

    The derivative at exactly the threshold is taken as 0 (the clamped
    branch), matching the convention of the variance floor.
    """
    mask = x.value > threshold
    out = Var(np.where(mask, x.value, threshold), (x,))

    def push(g):
        x.grad += g * mask

    out._push = push
    return out


def posdef_inverse(a: Var) -> Var:
    """Inverse of a symmetric positive-definite matrix via Cholesky.

    Forward: B = A^-1 (from the jittered Cholesky factorization).
    Adjoint: A_bar = -B^T G B^T, which for symmetric A is -B G B.
    """
    factor = linalg.cholesky(a.value)
    inv = linalg.cholesky_solve(factor, np.eye(factor.n))
    out = Var(inv, (a,))

    def push(g):
        a.grad += -(inv.T @ g @ inv.T)

    out._push = push
    return out


def backward(root: Var) -> None:
    """Accumulate adjoints of every node reachable from a scalar root."""
    if root.value.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._push is not None:
            node._push(node.grad)
