"""A small graph-based reverse-mode autodiff over numpy arrays.

Each :class:`Var` records its parents together with one vector-Jacobian
product per parent. :meth:`Var.backward` walks the graph in reverse
topological order and accumulates ``.grad`` on every node. Only the
operations this package needs are provided.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Var:
    __slots__ = ("value", "grad", "_parents", "_vjps")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = tuple(parents)
        self._vjps = tuple(vjps)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"

    @property
    def shape(self):
        return self.value.shape

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        if not isinstance(other, Var):
            return Var(self.value + other, (self,), (lambda g: _unbroadcast(g, self.shape),))
        return Var(
            self.value + other.value,
            (self, other),
            (lambda g: _unbroadcast(g, self.shape), lambda g: _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), (lambda g: -g,))

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Var):
            c = other
            return Var(self.value * c, (self,), (lambda g: _unbroadcast(g * c, self.shape),))
        a, b = self.value, other.value
        return Var(
            a * b,
            (self, other),
            (lambda g: _unbroadcast(g * b, self.shape), lambda g: _unbroadcast(g * a, other.shape)),
        )

    __rmul__ = __mul__

    def __matmul__(self, other):
        a, b = self.value, other.value
        return Var(a @ b, (self, other), (lambda g: g @ b.T, lambda g: a.T @ g))

    # -- elementwise --------------------------------------------------------
    def sin(self):
        x = self.value
        return Var(np.sin(x), (self,), (lambda g: g * np.cos(x),))

    def relu(self):
        mask = self.value > 0
        return Var(np.where(mask, self.value, 0), (self,), (lambda g: g * mask,))

    def abs(self):
        s = np.sign(self.value)
        return Var(np.abs(self.value), (self,), (lambda g: g * s,))

    # -- shape --------------------------------------------------------------
    def sum(self):
        shape = self.shape
        return Var(self.value.sum(), (self,), (lambda g: np.broadcast_to(g, shape),))

    def reshape(self, *shape):
        old = self.shape
        return Var(self.value.reshape(*shape), (self,), (lambda g: g.reshape(old),))

    def __getitem__(self, idx):
        # basic indexing only: selected elements must not repeat
        shape, dtype = self.shape, self.value.dtype

        def vjp(g):
            out = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
            out[idx] = g
            return out

        return Var(self.value[idx], (self,), (vjp,))

    # -- reverse sweep ------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.value)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = None
        self.grad = np.asarray(grad, dtype=self.value.dtype)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                g = vjp(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g


def custom(value, parent: Var, vjp) -> Var:
    """Wrap an externally computed ``value`` with a user-supplied VJP."""
    return Var(value, (parent,), (vjp,))
