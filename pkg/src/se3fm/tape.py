"""Minimal reverse-mode autodiff over the op set the vector-field model needs.

Nodes wrap float64 numpy arrays; the tape records creation order, which is a
valid topological order, and `backward` walks it in reverse accumulating
vector-Jacobian products. Parameters are views into one flat vector so the
full gradient comes back as a single array. Single-threaded by design; one
tape per forward pass.
"""

import numpy as np

from .errors import NumericError


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Node:
    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.vjp = vjp
        self.grad = None


class Tape:
    def __init__(self):
        self.nodes = []
        self.param_slots = []  # (node, offset) into the flat parameter vector

    def _record(self, node):
        self.nodes.append(node)
        return node

    def const(self, value):
        return self._record(Node(value))

    def param(self, flat, offset, shape):
        size = int(np.prod(shape))
        node = Node(flat[offset : offset + size].reshape(shape))
        self.param_slots.append((node, offset))
        return self._record(node)

    def add(self, a, b):
        def vjp(g):
            return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

        return self._record(Node(a.value + b.value, (a, b), vjp))

    def sub(self, a, b):
        def vjp(g):
            return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

        return self._record(Node(a.value - b.value, (a, b), vjp))

    def mul(self, a, b):
        def vjp(g):
            return (
                _unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape),
            )

        return self._record(Node(a.value * b.value, (a, b), vjp))

    def scale(self, a, s):
        s = float(s)
        return self._record(Node(a.value * s, (a,), lambda g: (g * s,)))

    def matmul(self, x, w):
        """x (..., D) @ w (D, H)."""

        def vjp(g):
            gx = g @ w.value.T
            axes = (tuple(range(x.value.ndim - 1)), tuple(range(g.ndim - 1)))
            gw = np.tensordot(x.value, g, axes=axes)
            return (gx, gw)

        return self._record(Node(x.value @ w.value, (x, w), vjp))

    def gelu(self, x):
        c = np.sqrt(2.0 / np.pi)
        u = c * (x.value + 0.044715 * x.value**3)
        t = np.tanh(u)
        y = 0.5 * x.value * (1.0 + t)

        def vjp(g):
            du = c * (1.0 + 3 * 0.044715 * x.value**2)
            dy = 0.5 * (1.0 + t) + 0.5 * x.value * (1.0 - t * t) * du
            return (g * dy,)

        return self._record(Node(y, (x,), vjp))

    def layernorm(self, x, gain, bias, eps=1e-6):
        """Normalize over the last axis, then scale and shift."""
        mu = x.value.mean(axis=-1, keepdims=True)
        xc = x.value - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        y = gain.value * xhat + bias.value

        def vjp(g):
            d = x.value.shape[-1]
            gxhat = g * gain.value
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
            ggain = _unbroadcast(g * xhat, gain.value.shape)
            gbias = _unbroadcast(g, bias.value.shape)
            return (gx, ggain, gbias)

        return self._record(Node(y, (x, gain, bias), vjp))

    def concat(self, parts, axis=-1):
        sizes = [p.value.shape[axis] for p in parts]
        value = np.concatenate([p.value for p in parts], axis=axis)

        def vjp(g):
            return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

        return self._record(Node(value, tuple(parts), vjp))

    def mean_axis(self, x, axis):
        n = x.value.shape[axis]
        value = x.value.mean(axis=axis, keepdims=True)

        def vjp(g):
            return (np.broadcast_to(g / n, x.value.shape).copy(),)

        return self._record(Node(value, (x,), vjp))

    def broadcast(self, x, shape):
        def vjp(g):
            return (_unbroadcast(g, x.value.shape),)

        return self._record(Node(np.broadcast_to(x.value, shape).copy(), (x,), vjp))

    def gather(self, table, index):
        """Rows of table (V, D) selected by an integer array."""
        index = np.asarray(index, dtype=int)

        def vjp(g):
            gt = np.zeros_like(table.value)
            np.add.at(gt, index, g)
            return (gt,)

        return self._record(Node(table.value[index], (table,), vjp))

    def sum_axes(self, x, axes):
        axes = tuple(axes)
        value = x.value.sum(axis=axes)

        def vjp(g):
            ge = g
            for ax in sorted(axes):
                ge = np.expand_dims(ge, ax)
            return (np.broadcast_to(ge, x.value.shape).copy(),)

        return self._record(Node(value, (x,), vjp))

    def sum_all(self, x):
        def vjp(g):
            return (np.full(x.value.shape, g),)

        return self._record(Node(x.value.sum(), (x,), vjp))

    def backward(self, loss, n_params, adjoint=1.0):
        """Gradient of the scalar `loss` w.r.t. the flat parameter vector."""
        if not self.nodes:
            raise NumericError("no recorded tape to differentiate")
        if loss.value.ndim != 0:
            raise NumericError("backward target must be scalar")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.asarray(float(adjoint))
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad = parent.grad + g
        grad = np.zeros(n_params)
        for node, offset in self.param_slots:
            if node.grad is not None:
                grad[offset : offset + node.grad.size] += node.grad.ravel()
        return grad
