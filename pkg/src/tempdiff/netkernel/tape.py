"""Minimal tape-based reverse-mode automatic differentiation on numpy.

Supports exactly the primitive set the training losses need: affine maps,
elementwise activations (exp, log, tanh, sigmoid and compositions),
broadcasting arithmetic, reductions and concatenation.  Everything is
float64.  Graphs are built eagerly; call :meth:`Tensor.backward` on a
scalar (or pass an explicit seed) to accumulate gradients into leaves.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "leaf", "const", "concat", "sigmoid", "tanh", "exp", "log"]


class Tensor:
    """A node in the autodiff graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    # -- graph construction -------------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        out = Tensor(self.data + other.data, parents=(self, other))
        out._vjp = lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        out._vjp = lambda g: (-g,)
        return out

    def __sub__(self, other):
        other = _wrap(other)
        out = Tensor(self.data - other.data, parents=(self, other))
        out._vjp = lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))
        return out

    def __rsub__(self, other):
        return _wrap(other).__sub__(self)

    def __mul__(self, other):
        other = _wrap(other)
        out = Tensor(self.data * other.data, parents=(self, other))
        out._vjp = lambda g: (
            _unbroadcast(g * other.data, self.shape),
            _unbroadcast(g * self.data, other.shape),
        )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out = Tensor(self.data / other.data, parents=(self, other))
        out._vjp = lambda g: (
            _unbroadcast(g / other.data, self.shape),
            _unbroadcast(-g * self.data / other.data**2, other.shape),
        )
        return out

    def __rtruediv__(self, other):
        return _wrap(other).__truediv__(self)

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only scalar exponents are supported")
        out = Tensor(self.data**p, parents=(self,))
        out._vjp = lambda g: (g * p * self.data ** (p - 1),)
        return out

    def __matmul__(self, other):
        other = _wrap(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        out = Tensor(self.data @ other.data, parents=(self, other))
        out._vjp = lambda g: (g @ other.data.T, self.data.T @ g)
        return out

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, self.shape).copy(),)

        out._vjp = vjp
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        out = Tensor(self.data.reshape(shape), parents=(self,))
        out._vjp = lambda g: (g.reshape(self.shape),)
        return out

    def transpose(self):
        if self.data.ndim != 2:
            raise ValueError("transpose supports 2-D tensors only")
        out = Tensor(self.data.T, parents=(self,))
        out._vjp = lambda g: (g.T,)
        return out

    @property
    def T(self):
        return self.transpose()

    def cols(self, start, stop):
        """Column slice [:, start:stop] of a 2-D tensor."""
        if self.data.ndim != 2:
            raise ValueError("cols supports 2-D tensors only")
        out = Tensor(self.data[:, start:stop], parents=(self,))

        def vjp(g):
            full = np.zeros(self.shape)
            full[:, start:stop] = g
            return (full,)

        out._vjp = vjp
        return out

    # -- backward ------------------------------------------------------------
    def backward(self, seed=None):
        """Accumulate gradients into every reachable leaf.

        Args:
            seed: Upstream gradient; defaults to 1 for scalar outputs.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen or not node.requires_grad:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        grads = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        # leaves visited but only reachable through non-grad paths keep None


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def leaf(data) -> Tensor:
    """A differentiable leaf (parameter)."""
    return Tensor(data, requires_grad=True)


def const(data) -> Tensor:
    """A non-differentiable constant node."""
    return Tensor(data, requires_grad=False)


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data), parents=(x,))
    out._vjp = lambda g: (g * out.data,)
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), parents=(x,))
    out._vjp = lambda g: (g / x.data,)
    return out


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data), parents=(x,))
    out._vjp = lambda g: (g * (1.0 - out.data**2),)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(1.0 / (1.0 + np.exp(-x.data)), parents=(x,))
    out._vjp = lambda g: (g * out.data * (1.0 - out.data),)
    return out


def concat(tensors, axis=1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    out._vjp = lambda g: tuple(np.split(g, splits, axis=axis))
    return out
