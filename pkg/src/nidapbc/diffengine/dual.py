"""Nestable forward-mode values.

A :class:`Dual` pairs a primal value with tangents along ``k`` directions at
once.  Tangents carry the direction axis in front: if the primal has shape
``S`` the tangent has shape ``(k,) + S``.  Primal and tangent may themselves be
tensors (so the forward sweep is recorded for a reverse pass) or duals of an
older tag (nesting).

All axis arguments are negative so that leading direction axes never shift
them.  Indexing must start with ``Ellipsis`` for the same reason.
"""
from __future__ import annotations

import itertools

import numpy as np

from . import tensor as _t
from .tensor import Tensor

_tags = itertools.count(1)


class NestingError(RuntimeError):
    """Raised when forward levels are nested deeper than supported."""


MAX_FORWARD_DEPTH = 2


def new_tag() -> int:
    return next(_tags)


def depth(x) -> int:
    d = 0
    while isinstance(x, Dual):
        d += 1
        x = x.primal
    return d


def shape(x) -> tuple:
    while isinstance(x, Dual):
        x = x.primal
    if isinstance(x, Tensor):
        return x.data.shape
    return np.shape(x)


def value(x) -> np.ndarray:
    """Numeric value with every derivative layer stripped."""
    while isinstance(x, Dual):
        x = x.primal
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


# -- generic primitives shared by every layer ------------------------------
def _reshape(x, s):
    if isinstance(x, (Dual, Tensor)):
        return x.reshape(s)
    return np.reshape(x, s)


def _transpose(x, perm):
    if isinstance(x, (Dual, Tensor)):
        return x.transpose(perm)
    return np.transpose(x, perm)


def _broadcast_to(x, s):
    if tuple(shape(x)) == tuple(s):
        return x
    if isinstance(x, (Dual, Tensor)):
        return x.broadcast_to(s)
    return np.broadcast_to(x, s)


def _lift(t, ndim):
    """Insert unit axes right after the direction axis so that ``t`` has base rank ``ndim``."""
    s = shape(t)
    missing = ndim + 1 - len(s)
    if missing <= 0:
        return t
    return _reshape(t, (s[0],) + (1,) * missing + tuple(s[1:]))


def _full(t, k, base):
    """Lift and broadcast a tangent to exactly ``(k,) + base``."""
    return _broadcast_to(_lift(t, len(base)), (k,) + tuple(base))


def _split(x, tag):
    if isinstance(x, Dual) and x.tag == tag:
        return x.primal, x.tangent
    return x, None


def _top_tag(*xs):
    return max(x.tag for x in xs if isinstance(x, Dual))


_NUMPY_UNARY = {
    "tanh": np.tanh,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "abs": np.abs,
    "softplus": lambda x: np.logaddexp(0.0, x),
    "sigmoid": _t.sigmoid_np,
    "relu": lambda x: np.maximum(x, 0.0),
}


def apply_unary(name, x):
    """Dispatch an elementwise function to whichever layer ``x`` lives in."""
    if isinstance(x, (Dual, Tensor)):
        return getattr(x, name)()
    return _NUMPY_UNARY[name](np.asarray(x, dtype=np.float64))


class Dual:
    __slots__ = ("primal", "tangent", "tag")
    __array_ufunc__ = None

    def __init__(self, primal, tangent, tag):
        self.primal = primal
        self.tangent = tangent
        self.tag = tag

    @property
    def shape(self):
        return shape(self.primal)

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def ndirs(self):
        return shape(self.tangent)[0]

    def __repr__(self):
        return f"Dual(tag={self.tag}, shape={self.shape}, ndirs={self.ndirs})"

    # -- binary arithmetic ---------------------------------------------------
    def __add__(self, other):
        return _add(self, other, 1.0)

    def __radd__(self, other):
        return _add(other, self, 1.0)

    def __sub__(self, other):
        return _add(self, other, -1.0)

    def __rsub__(self, other):
        return _add(other, self, -1.0)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __neg__(self):
        return Dual(-self.primal, -self.tangent, self.tag)

    def __pow__(self, c):
        if isinstance(c, (Dual, Tensor)):
            raise TypeError("only constant exponents are supported")
        p = self.primal
        return Dual(p**c, (c * p ** (c - 1)) * self.tangent, self.tag)

    # -- elementwise functions ----------------------------------------------
    def tanh(self):
        y = apply_unary("tanh", self.primal)
        return Dual(y, (1.0 - y * y) * self.tangent, self.tag)

    def exp(self):
        y = apply_unary("exp", self.primal)
        return Dual(y, y * self.tangent, self.tag)

    def log(self):
        return Dual(apply_unary("log", self.primal), self.tangent / self.primal, self.tag)

    def sqrt(self):
        y = apply_unary("sqrt", self.primal)
        return Dual(y, self.tangent * (0.5 / y), self.tag)

    def sin(self):
        p = self.primal
        return Dual(apply_unary("sin", p), apply_unary("cos", p) * self.tangent, self.tag)

    def cos(self):
        p = self.primal
        return Dual(apply_unary("cos", p), -apply_unary("sin", p) * self.tangent, self.tag)

    def softplus(self):
        p = self.primal
        return Dual(apply_unary("softplus", p), apply_unary("sigmoid", p) * self.tangent, self.tag)

    def sigmoid(self):
        s = apply_unary("sigmoid", self.primal)
        return Dual(s, (s * (1.0 - s)) * self.tangent, self.tag)

    def abs(self):
        p = self.primal
        return Dual(apply_unary("abs", p), np.sign(value(p)) * self.tangent, self.tag)

    def relu(self):
        p = self.primal
        return Dual(apply_unary("relu", p), (value(p) > 0.0) * self.tangent, self.tag)

    # -- reductions and shape --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        if axis is None:
            axis = tuple(range(-self.ndim, 0))
        axes = axis if isinstance(axis, tuple) else (axis,)
        if any(a >= 0 for a in axes):
            raise ValueError("Dual reductions take negative axes only")
        return Dual(
            _sum(self.primal, axis, keepdims), _sum(self.tangent, axis, keepdims), self.tag
        )

    def reshape(self, s):
        s = tuple(s)
        return Dual(_reshape(self.primal, s), _reshape(self.tangent, (self.ndirs,) + s), self.tag)

    def transpose(self, perm):
        perm = tuple(perm)
        return Dual(
            _transpose(self.primal, perm),
            _transpose(self.tangent, (0,) + tuple(p + 1 for p in perm)),
            self.tag,
        )

    def swapaxes(self, a1, a2):
        if a1 >= 0 or a2 >= 0:
            raise ValueError("Dual.swapaxes takes negative axes only")
        nd = self.ndim
        perm = list(range(nd))
        perm[a1], perm[a2] = perm[a2], perm[a1]
        return self.transpose(perm)

    def broadcast_to(self, s):
        s = tuple(s)
        return Dual(_broadcast_to(self.primal, s), _full(self.tangent, self.ndirs, s), self.tag)

    def __getitem__(self, idx):
        if not (isinstance(idx, tuple) and idx and idx[0] is Ellipsis):
            raise IndexError("Dual indexing must start with Ellipsis, e.g. x[..., 0]")
        return Dual(self.primal[idx], self.tangent[idx], self.tag)


def _sum(x, axis, keepdims):
    if isinstance(x, (Dual, Tensor)):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def _add(a, b, sign):
    tag = _top_tag(a, b)
    ap, at = _split(a, tag)
    bp, bt = _split(b, tag)
    primal = ap + bp if sign > 0 else ap - bp
    base = shape(primal)
    k = shape(at if at is not None else bt)[0]
    if at is None:
        tan = _full(bt if sign > 0 else -bt, k, base)
    elif bt is None:
        tan = _full(at, k, base)
    else:
        r = len(base)
        tan = _lift(at, r) + _lift(bt, r) if sign > 0 else _lift(at, r) - _lift(bt, r)
        tan = _full(tan, k, base)
    return Dual(primal, tan, tag)


def _mul(a, b):
    tag = _top_tag(a, b)
    ap, at = _split(a, tag)
    bp, bt = _split(b, tag)
    primal = ap * bp
    base = shape(primal)
    r = len(base)
    terms = []
    if at is not None:
        terms.append(_lift(at, r) * bp)
    if bt is not None:
        terms.append(ap * _lift(bt, r))
    tan = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    k = shape(tan)[0]
    return Dual(primal, _full(tan, k, base), tag)


def _div(a, b):
    tag = _top_tag(a, b)
    ap, at = _split(a, tag)
    bp, bt = _split(b, tag)
    primal = ap / bp
    base = shape(primal)
    r = len(base)
    terms = []
    if at is not None:
        terms.append(_lift(at, r) / bp)
    if bt is not None:
        terms.append(-(primal * _lift(bt, r)) / bp)
    tan = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    k = shape(tan)[0]
    return Dual(primal, _full(tan, k, base), tag)


def _matmul(a, b):
    tag = _top_tag(a, b)
    ap, at = _split(a, tag)
    bp, bt = _split(b, tag)
    if len(shape(ap)) < 2 or len(shape(bp)) < 2:
        raise ValueError("Dual matmul needs operands with at least two dimensions")
    primal = ap @ bp
    base = shape(primal)
    r = len(base)
    terms = []
    if at is not None:
        terms.append(_lift(at, r) @ bp)
    if bt is not None:
        terms.append(ap @ _lift(bt, r))
    tan = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    k = shape(tan)[0]
    return Dual(primal, _full(tan, k, base), tag)


def stack_or_concat(items, axis, fn_np, fn_t, stack):
    """Shared implementation of ``stack``/``concatenate`` across all layers."""
    if axis >= 0:
        raise ValueError("stack/concatenate take negative axes only")
    duals = [x for x in items if isinstance(x, Dual)]
    if duals:
        tag = _top_tag(*duals)
        k = next(x.ndirs for x in duals if x.tag == tag)
        prims, tans = [], []
        for x in items:
            p, t = _split(x, tag)
            prims.append(p)
            s = shape(p)
            tans.append(np.zeros((k,) + tuple(s)) if t is None else _full(t, k, s))
        return Dual(
            stack_or_concat(prims, axis, fn_np, fn_t, stack),
            stack_or_concat(tans, axis, fn_np, fn_t, stack),
            tag,
        )
    if any(isinstance(x, Tensor) for x in items):
        return fn_t(items, axis)
    return fn_np([np.asarray(x) for x in items], axis=axis)


def solve_const(A, b):
    """Solve ``A z = b`` for constant ``A``; linear in ``b`` at every layer."""
    if isinstance(b, Dual):
        return Dual(solve_const(A, b.primal), solve_const(A, _lift(b.tangent, b.ndim)), b.tag)
    if isinstance(b, Tensor):
        return _t.solve_const(A, b)
    return np.linalg.solve(A, b)
