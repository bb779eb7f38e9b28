"""Reverse-mode tape over numpy arrays.

A :class:`Tensor` records the operation that produced it together with a
closure mapping the output cotangent to cotangents of its tensor operands.
Leaves (tensors built directly from data) are the trainable parameters;
``backward`` accumulates into their ``grad`` attribute.

Only one reverse level exists.  Backward closures operate on raw numpy
arrays, so the sweep itself is not recorded.  Derivatives with respect to the
state are taken with forward mode (:mod:`.dual`) on top of tensors, which makes
every tangent computation part of the tape as well.
"""
from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


class GraphError(RuntimeError):
    """Raised when a backward sweep is requested on something that was not recorded."""


@contextlib.contextmanager
def no_grad():
    """Evaluate tensor operations on raw arrays without recording."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` following numpy broadcasting rules."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _make(data, parents, backward):
    if not _grad_enabled:
        return data
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if not parents:
        return data
    return Tensor(data, parents, backward)


def _swap(a):
    return np.swapaxes(a, -1, -2)


def sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "name")
    __array_ufunc__ = None

    def __init__(self, data, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self):
        self.grad = None

    # -- backward sweep ------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward without an explicit cotangent needs a scalar output")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        cot = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = cot.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in cot:
                    cot[key] = cot[key] + pg
                else:
                    cot[key] = pg

    # -- arithmetic ------------------------------------------------------
    def _binary(self, other, fwd, back, reverse=False):
        if type(other).__name__ == "Dual":
            return NotImplemented
        a, b = (other, self) if reverse else (self, other)
        ad, bd = _data(a), _data(b)
        out = fwd(ad, bd)
        sa, sb = np.shape(ad), np.shape(bd)

        def backward(g):
            ga, gb = back(g, ad, bd, out)
            res = []
            if isinstance(a, Tensor):
                res.append(unbroadcast(ga, sa))
            if isinstance(b, Tensor):
                res.append(unbroadcast(gb, sb))
            return res

        return _make(out, (a, b), backward)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b, o: (g, g))

    def __radd__(self, other):
        return self._binary(other, np.add, lambda g, a, b, o: (g, g), reverse=True)

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b, o: (g, -g))

    def __rsub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b, o: (g, -g), reverse=True)

    def __mul__(self, other):
        return self._binary(other, np.multiply, lambda g, a, b, o: (g * b, g * a))

    def __rmul__(self, other):
        return self._binary(other, np.multiply, lambda g, a, b, o: (g * b, g * a), reverse=True)

    def __truediv__(self, other):
        return self._binary(other, np.divide, lambda g, a, b, o: (g / b, -g * o / b))

    def __rtruediv__(self, other):
        return self._binary(other, np.divide, lambda g, a, b, o: (g / b, -g * o / b), reverse=True)

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        if type(other).__name__ == "Dual":
            return NotImplemented
        return _matmul(other, self)

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, c):
        if isinstance(c, (Tensor,)) or type(c).__name__ == "Dual":
            raise TypeError("only constant exponents are supported")
        x = self.data
        return _make(x**c, (self,), lambda g: (g * c * x ** (c - 1),))

    # -- elementwise -----------------------------------------------------
    def tanh(self):
        y = np.tanh(self.data)
        return _make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def exp(self):
        y = np.exp(self.data)
        return _make(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return _make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return _make(y, (self,), lambda g: (0.5 * g / y,))

    def sin(self):
        x = self.data
        return _make(np.sin(x), (self,), lambda g: (g * np.cos(x),))

    def cos(self):
        x = self.data
        return _make(np.cos(x), (self,), lambda g: (-g * np.sin(x),))

    def softplus(self):
        x = self.data
        return _make(np.logaddexp(0.0, x), (self,), lambda g: (g * sigmoid_np(x),))

    def sigmoid(self):
        y = sigmoid_np(self.data)
        return _make(y, (self,), lambda g: (g * y * (1.0 - y),))

    def abs(self):
        x = self.data
        # sign(0) = 0 gives the zero subgradient at the kink
        return _make(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def relu(self):
        x = self.data
        return _make(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0.0),))

    # -- shape manipulation ----------------------------------------------
    def sum(self, axis=None, keepdims=False):
        x = self.data
        out = x.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape),)

        return _make(out, (self,), backward)

    def reshape(self, shape):
        old = self.data.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, perm):
        inv = np.argsort(perm)
        return _make(np.transpose(self.data, perm), (self,), lambda g: (np.transpose(g, inv),))

    def swapaxes(self, a1, a2):
        return _make(
            np.swapaxes(self.data, a1, a2), (self,), lambda g: (np.swapaxes(g, a1, a2),)
        )

    def broadcast_to(self, shape):
        old = self.data.shape
        return _make(np.broadcast_to(self.data, shape), (self,), lambda g: (unbroadcast(g, old),))

    def __getitem__(self, idx):
        x = self.data

        def backward(g):
            full = np.zeros_like(x)
            if _needs_add_at(idx):
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return _make(x[idx], (self,), backward)


def _needs_add_at(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _matmul(a, b):
    ad, bd = _data(a), _data(b)
    out = ad @ bd
    sa, sb = np.shape(ad), np.shape(bd)

    def backward(g):
        res = []
        if isinstance(a, Tensor):
            res.append(unbroadcast(g @ _swap(bd), sa))
        if isinstance(b, Tensor):
            if len(sb) == 2:
                # collapse the batch dims into one gemm
                res.append(ad.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                res.append(unbroadcast(_swap(ad) @ g, sb))
        return res

    return _make(out, (a, b), backward)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    order.reverse()
    return order


def stack(items, axis):
    datas = [_data(x) for x in items]
    out = np.stack(datas, axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return [parts[i] for i, x in enumerate(items) if isinstance(x, Tensor)]

    return _make(out, items, backward)


def concatenate(items, axis):
    datas = [_data(x) for x in items]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return [parts[i] for i, x in enumerate(items) if isinstance(x, Tensor)]

    return _make(out, items, backward)


def solve_const(A: np.ndarray, b):
    """Solve ``A z = b`` for a constant matrix ``A`` and a recorded right-hand side."""
    bd = _data(b)
    out = np.linalg.solve(A, bd)
    sb = np.shape(bd)
    return _make(out, (b,), lambda g: (unbroadcast(np.linalg.solve(_swap(A), g), sb),))
