"""Reverse-mode autodiff over numpy float64 arrays.

A `Tensor` wraps a value array and, when it participates in a traced
operation, a closure that scatters the output gradient back to its
parents.  Ops live in :mod:`splitee.ops`; this module only provides the
container and the topological backward pass.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor through the traced graph."""
        if grad is None:
            if self.values.size != 1:
                raise ShapeError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.values)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate_grad(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # Interior gradients are fully consumed once the node's
                # backward has run; dropping them bounds peak memory.
                node.grad = None


def traced(values: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Build an intermediate tensor carrying its backward closure."""
    out = Tensor(values)
    out._parents = tuple(p for p in parents if p is not None)
    out._backward = backward
    return out
