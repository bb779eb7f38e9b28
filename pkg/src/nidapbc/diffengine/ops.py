"""Layer-agnostic array functions.

Every function here accepts plain arrays, recorded tensors or duals (possibly
nested) and returns an object of the "highest" kind among its inputs.  Model
code is written once against these functions and is then differentiable in
state (forward) and in parameters (reverse).
"""
from __future__ import annotations

import numpy as np

from . import dual as _d
from . import tensor as _t
from .dual import Dual, apply_unary, shape, value
from .tensor import Tensor

NORM_EPS = 1e-12


def tanh(x):
    return apply_unary("tanh", x)


def exp(x):
    return apply_unary("exp", x)


def log(x):
    return apply_unary("log", x)


def sqrt(x):
    return apply_unary("sqrt", x)


def sin(x):
    return apply_unary("sin", x)


def cos(x):
    return apply_unary("cos", x)


def abs(x):  # noqa: A001 - mirrors numpy naming
    return apply_unary("abs", x)


def softplus(x):
    return apply_unary("softplus", x)


def sigmoid(x):
    return apply_unary("sigmoid", x)


def relu(x):
    """``max(0, x)`` with derivative 0 at the kink."""
    return apply_unary("relu", x)


def square(x):
    return x * x


def sum(x, axis=None, keepdims=False):  # noqa: A001
    if isinstance(x, (Dual, Tensor)):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def reshape(x, s):
    if isinstance(x, (Dual, Tensor)):
        return x.reshape(tuple(s))
    return np.reshape(x, s)


def swapaxes(x, a1=-1, a2=-2):
    if isinstance(x, (Dual, Tensor)):
        return x.swapaxes(a1, a2)
    return np.swapaxes(x, a1, a2)


def transpose(x, perm):
    if isinstance(x, (Dual, Tensor)):
        return x.transpose(tuple(perm))
    return np.transpose(x, perm)


def expand_last(x):
    """Append a unit axis: ``(..., n) -> (..., n, 1)``."""
    return reshape(x, tuple(shape(x)) + (1,))


def squeeze_last(x):
    s = tuple(shape(x))
    if s[-1] != 1:
        raise ValueError(f"last axis has size {s[-1]}, expected 1")
    return reshape(x, s[:-1])


def stack(items, axis=-1):
    return _d.stack_or_concat(list(items), axis, np.stack, _t.stack, True)


def concatenate(items, axis=-1):
    return _d.stack_or_concat(list(items), axis, np.concatenate, _t.concatenate, False)


def solve_const(A, b):
    """Solve ``A z = b`` where ``A`` is a constant (non-differentiated) array."""
    return _d.solve_const(np.asarray(A, dtype=np.float64), b)


def norm(x, axis=-1):
    """Euclidean norm along ``axis``; the derivative is taken as 0 where the norm is < 1e-12."""
    if isinstance(x, Dual):
        p = x.primal
        n = norm(p, axis)
        mask = value(n) < NORM_EPS
        num = sum(x.tangent * p, axis=axis)
        tan = (num / _mask_small(n, mask)) * np.where(mask, 0.0, 1.0)
        return Dual(n, _d._full(tan, x.ndirs, shape(n)), x.tag)
    if isinstance(x, Tensor):
        xd = x.data
        n = np.sqrt(np.sum(xd * xd, axis=axis))
        mask = n < NORM_EPS
        safe = np.where(mask, 1.0, n)

        def backward(g):
            scale = np.where(mask, 0.0, g / safe)
            return (np.expand_dims(scale, axis) * xd,)

        return _t._make(n, (x,), backward)
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.sum(x * x, axis=axis))


def _mask_small(n, mask):
    # replace tiny norms by 1 so the division stays finite; the result is masked out anyway
    if not mask.any():
        return n
    return n * np.where(mask, 0.0, 1.0) + np.where(mask, 1.0, 0.0)


def frobenius(x):
    """Frobenius norm over the last two axes."""
    s = tuple(shape(x))
    return norm(reshape(x, s[:-2] + (s[-2] * s[-1],)), axis=-1)


def const(x):
    """Strip every derivative layer (gradient flow blocked)."""
    return value(x)
