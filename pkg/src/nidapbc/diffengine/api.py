"""User-facing derivative operators.

Programs are batched: they map states ``(B, n)`` to per-sample outputs
``(B,)`` (scalar programs) or ``(B, m)`` (vector programs), treating samples
independently.  A single state ``(n,)`` is accepted as well.
"""
from __future__ import annotations

import contextlib

import numpy as np

from .dual import MAX_FORWARD_DEPTH, Dual, NestingError, depth, new_tag, shape
from .tensor import GraphError, Tensor


class NumericError(FloatingPointError):
    """Non-finite value produced during a forward sweep."""


@contextlib.contextmanager
def _checked():
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            yield
    except FloatingPointError as exc:
        raise NumericError(f"numeric overflow in forward sweep ({exc})") from None


def _as_batch(x):
    if isinstance(x, (Dual, Tensor)):
        return x, False
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return x.reshape(1, 1), True
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _seed(x, directions):
    """Wrap ``x`` in a new forward level with the given tangent stack ``(k, B, n)``."""
    if depth(x) >= MAX_FORWARD_DEPTH:
        raise NestingError(f"forward nesting deeper than {MAX_FORWARD_DEPTH} levels")
    return Dual(x, directions, new_tag())


def _basis(x):
    B, n = shape(x)
    e = np.zeros((n, B, n))
    idx = np.arange(n)
    e[idx, :, idx] = 1.0
    return e


def _tangent_of(out, tag, k):
    if isinstance(out, Dual) and out.tag == tag:
        return out.primal, out.tangent
    return out, np.zeros((k,) + tuple(shape(out)))


def _dirs_last(t):
    nd = len(shape(t))
    perm = tuple(range(1, nd)) + (0,)
    if isinstance(t, (Dual, Tensor)):
        return t.transpose(perm)
    return np.transpose(t, perm)


def _finite_check(*vals):
    from .dual import value

    for v in vals:
        if not np.all(np.isfinite(value(v))):
            raise NumericError("numeric overflow in forward sweep")


def directional_derivative(program, x, v):
    """``v . grad program(x)`` by one forward sweep."""
    xb, single = _as_batch(x)
    vb = np.asarray(v, dtype=np.float64).reshape(shape(xb))
    with _checked():
        xd = _seed(xb, vb[None])
        out = program(xd)
    val, tan = _tangent_of(out, xd.tag, 1)
    _finite_check(val, tan)
    tan = tan.reshape(tuple(shape(tan)[1:]))
    return _unbatch(tan, single)


def _unbatch(t, single):
    if single and not isinstance(t, (Dual, Tensor)):
        return np.asarray(t)[0]
    return t


def value_and_gradient_x(program, x):
    """Return ``(program(x), grad_x program(x))`` with the gradient shaped like ``x``."""
    xb, single = _as_batch(x)
    n = shape(xb)[-1]
    with _checked():
        xd = _seed(xb, _basis(xb))
        out = program(xd)
    val, tan = _tangent_of(out, xd.tag, n)
    if len(shape(val)) != 1:
        raise ValueError(f"gradient_x needs a scalar program, got per-sample shape {shape(val)[1:]}")
    _finite_check(val, tan)
    g = _dirs_last(tan)
    return _unbatch(val, single), _unbatch(g, single)


def gradient_x(program, x):
    return value_and_gradient_x(program, x)[1]


def value_and_jacobian_x(program, x):
    """Return ``(program(x), d program / dx)``; the Jacobian is ``(B, m, n)``."""
    xb, single = _as_batch(x)
    n = shape(xb)[-1]
    with _checked():
        xd = _seed(xb, _basis(xb))
        out = program(xd)
    val, tan = _tangent_of(out, xd.tag, n)
    _finite_check(val, tan)
    return _unbatch(val, single), _unbatch(_dirs_last(tan), single)


def jacobian_x(program, x):
    return value_and_jacobian_x(program, x)[1]


def hessian_x(program, x):
    """Jacobian of the gradient, ``(B, n, n)``."""
    return jacobian_x(lambda z: gradient_x(program, z), x)


def gradient_params(loss, params):
    """Reverse sweep of a recorded scalar ``loss``; returns one gradient per parameter.

    Parameters the loss does not depend on receive zeros.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("loss was not recorded on the tape (no parameter dependence or no_grad)")
    if loss.data.size != 1:
        raise GraphError("gradient_params needs a scalar loss")
    for p in params:
        p.grad = None
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
