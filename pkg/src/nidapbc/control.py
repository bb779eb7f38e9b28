"""Closed loop under the learned IDA-PBC law and its perturbation decomposition.

With ``u = beta(x)`` the closed loop ``f + g beta`` equals ``f~d + xi``, where
``f~d = (J~d - R~d) grad H~d`` and ``xi`` solves ``G xi = (0; -mu)`` with
``G = [g^T; g_perp]`` and the mismatch ``mu = -g_perp (f - f~d)``.  Only
``|mu|`` enters the losses, so the sign convention of ``mu`` is cosmetic there.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .diffengine import ops
from .diffengine.dual import shape, value
from .neuralnets import SurrogateTriple
from .plant import Plant


@dataclass
class ClosedLoop:
    plant: Plant
    surrogates: SurrogateTriple

    def __post_init__(self):
        if self.plant.n != self.surrogates.n:
            raise ValueError(f"plant has n={self.plant.n}, surrogates n={self.surrogates.n}")

    def evaluate(self, x):
        return LoopTerms.compute(self, x)


def _matvec(M, v):
    """Batched ``M v`` for ``M (..., n, k)`` and ``v (..., k)``."""
    return ops.squeeze_last(M @ ops.expand_last(v))


def _solve(A, b):
    return ops.squeeze_last(ops.solve_const(A, ops.expand_last(b)))


@dataclass
class LoopTerms:
    """Every closed-loop quantity at a batch of states, sharing one evaluation of the surrogates."""

    f: object
    grad_h: object
    jd: object
    rd: object
    fd: object
    beta: object
    mu: object
    xi: object

    @classmethod
    def compute(cls, cl, x):
        plant, tri = cl.plant, cl.surrogates
        f = plant.f(x)
        gh = tri.grad_hd(x)
        jd, rd = tri.jd(x), tri.rd(x)
        fd = _matvec(jd - rd, gh)
        g = plant.g(value(x))
        diff = fd - f
        beta = _solve(g.T @ g, diff @ g)
        mu = -((f - fd) @ plant.g_perp(value(x)).T)
        lead = tuple(shape(mu))[:-1]
        # G xi = (0; g_perp (f - f~d)) = (0; -mu) is what makes f + g beta = f~d + xi
        rhs = ops.concatenate([np.zeros(lead + (plant.m,)), -mu], axis=-1)
        xi = _solve(plant.G(value(x)), rhs)
        return cls(f, gh, jd, rd, fd, beta, mu, xi)

    def closed_loop(self, g):
        return self.f + self.beta @ np.asarray(g).T

    def margin(self):
        rgh = _matvec(self.rd, self.grad_h)
        return ops.sum(self.grad_h * rgh, axis=-1) - ops.sum(self.grad_h * self.xi, axis=-1)


def fd_tilde(surrogates, x):
    return _matvec(surrogates.jd(x) - surrogates.rd(x), surrogates.grad_hd(x))


def beta_tilde(cl, x):
    g = cl.plant.g(value(x))
    if np.linalg.matrix_rank(g) < g.shape[1]:
        raise np.linalg.LinAlgError("input map is rank deficient")
    return cl.evaluate(x).beta


def mismatch_mu(cl, x):
    return cl.evaluate(x).mu


def xi(cl, x):
    return cl.evaluate(x).xi


def closed_loop_field(cl, x):
    """``f + g beta`` at ``x``."""
    t = cl.evaluate(x)
    return t.closed_loop(cl.plant.g(value(x)))


def dissipation_margin(cl, x):
    """``grad H~d^T R~d grad H~d - grad H~d^T xi``; positive means ``H~d`` decreases."""
    return cl.evaluate(x).margin()


def prop2_residual(cl, x):
    """Relative gap between ``f + g beta`` and ``f~d + xi`` at each state."""
    t = cl.evaluate(x)
    lhs = value(t.closed_loop(cl.plant.g(value(x))))
    rhs = value(t.fd + t.xi)
    fd = value(t.fd)
    return np.linalg.norm(lhs - rhs, axis=-1) / (1.0 + np.linalg.norm(fd, axis=-1))


def g_inverse_norm(plant):
    return float(linalg.spectral_norm(np.linalg.inv(plant.G())))
