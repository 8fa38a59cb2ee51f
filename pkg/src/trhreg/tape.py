"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Node` wraps a float64 array; operations record vector-Jacobian
closures so that :func:`backward` can accumulate exact gradients for every
leaf.  The op set is deliberately small -- just enough to express the
training objectives in this package (dense layers, ReLU, softmax algebra
and the closed-form curvature terms) -- and everything is batched: node
payloads are scalars, ``(m,)`` vectors or ``(m, k)`` matrices.

Broadcasting between operands follows numpy; adjoints are summed back over
broadcast axes.  There is no graph reuse across calls: build, evaluate,
backward, discard.
"""

from __future__ import annotations

import numpy as np


class Node:
    __slots__ = ("value", "grad", "_edges")

    def __init__(self, value, edges=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._edges = edges  # tuple of (parent Node, vjp callable)

    @property
    def shape(self):
        return self.value.shape

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other):
        other = wrap(other)
        return Node(self.value + other.value,
                    ((self, lambda g: _unbroadcast(g, self.shape)),
                     (other, lambda g: _unbroadcast(g, other.shape))))

    __radd__ = __add__

    def __neg__(self):
        return Node(-self.value, ((self, lambda g: -g),))

    def __sub__(self, other):
        return self + (-wrap(other))

    def __rsub__(self, other):
        return wrap(other) + (-self)

    def __mul__(self, other):
        other = wrap(other)
        a, b = self, other
        return Node(a.value * b.value,
                    ((a, lambda g: _unbroadcast(g * b.value, a.shape)),
                     (b, lambda g: _unbroadcast(g * a.value, b.shape))))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = wrap(other)
        a, b = self, other
        return Node(a.value / b.value,
                    ((a, lambda g: _unbroadcast(g / b.value, a.shape)),
                     (b, lambda g: _unbroadcast(-g * a.value / (b.value ** 2), b.shape))))

    def __rtruediv__(self, other):
        return wrap(other) / self

    def __matmul__(self, other):
        other = wrap(other)
        a, b = self, other
        return Node(a.value @ b.value,
                    ((a, lambda g: g @ b.value.T),
                     (b, lambda g: a.value.T @ g)))


def wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def leaf(value) -> Node:
    """A differentiable input (weight matrix, bias vector)."""
    return Node(value)


def constant(value) -> Node:
    """A non-differentiable input; gradients stop here."""
    return Node(value)


def _unbroadcast(grad, shape):
    """Sum grad back down to `shape` after numpy broadcasting."""
    g = np.asarray(grad)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def relu(a: Node) -> Node:
    mask = (a.value > 0).astype(np.float64)  # derivative at exactly 0 is 0
    return Node(a.value * mask, ((a, lambda g: g * mask),))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, ((a, lambda g: g * out),))


def log(a: Node) -> Node:
    return Node(np.log(a.value), ((a, lambda g: g / a.value),))


def nsum(a: Node, axis=None, keepdims=False) -> Node:
    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.shape).copy()
    return Node(a.value.sum(axis=axis, keepdims=keepdims), ((a, vjp),))


def mean(a: Node) -> Node:
    n = a.value.size
    return Node(a.value.mean(), ((a, lambda g: np.full(a.shape, g / n)),))


def row_sum(a: Node, keepdims=False) -> Node:
    """Sum over the last axis of a 2-d node."""
    return nsum(a, axis=1, keepdims=keepdims)


def log_softmax(logits: Node) -> Node:
    """Row-wise log-softmax, stable via a constant max shift."""
    shift = logits.value.max(axis=1, keepdims=True)  # constant wrt graph
    centered = logits - constant(shift)
    lse = log(row_sum(exp(centered), keepdims=True))
    return centered - lse


def backward(out: Node) -> None:
    """Accumulate gradients of a scalar node into every reachable node."""
    if out.value.ndim != 0:
        raise ValueError("backward expects a scalar node")
    order = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._edges:
            if id(parent) not in seen:
                stack.append((parent, False))
    for node in order:
        node.grad = np.zeros(node.shape)
    out.grad = np.ones(())
    for node in reversed(order):
        g = node.grad
        for parent, vjp in node._edges:
            parent.grad = parent.grad + vjp(g)
