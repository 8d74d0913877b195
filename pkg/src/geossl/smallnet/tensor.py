"""A small tape-free reverse-mode autodiff over dense float64 arrays.

Each :class:`Tensor` remembers the tensors it was computed from and a closure
that pushes its gradient back to them. ``backward`` walks the recorded graph in
reverse topological order.
"""

from __future__ import annotations

import os

import numpy as np

_DEBUG = os.environ.get("GEOSSL_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """Toggle finite-value checks after every primitive."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, op="leaf",
                 requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        if _DEBUG and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite value produced by {op}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> dict | None:
    """Back-propagate from a scalar ``loss``.

    Every reachable tensor that requires a gradient gets a fresh ``.grad``
    (earlier gradients are discarded). When ``params`` (a name -> Tensor
    mapping) is given, a dict of their gradients is returned, with zeros for
    parameters the loss does not reach.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    for p in (params or {}).values():
        p.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    if params is None:
        return None
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}
