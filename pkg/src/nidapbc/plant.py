"""Input-affine plant models and the three benchmark systems.

States are batched ``(B, n)``; the drift is written with the generic ops so it
can be differentiated in ``x``.  All benchmarks use a constant input map and
a constant exact left-annihilator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffengine import gradient_x, ops
from .diffengine.dual import value

GRAVITY = 9.81


class SingularMassError(ValueError):
    pass


@dataclass
class Plant:
    name: str
    n: int
    m: int
    drift: Callable
    g_const: np.ndarray  # (n, m)
    g_perp_const: np.ndarray  # (n - m, n)
    x_star: np.ndarray
    box: tuple  # (lo, hi)
    params: dict = field(default_factory=dict)
    hamiltonian: Callable | None = None

    def __post_init__(self):
        self.g_const = np.asarray(self.g_const, dtype=np.float64)
        self.g_perp_const = np.asarray(self.g_perp_const, dtype=np.float64)
        self.x_star = np.asarray(self.x_star, dtype=np.float64)
        self.box = tuple(np.asarray(b, dtype=np.float64) for b in self.box)
        if self.g_const.shape != (self.n, self.m):
            raise ValueError(f"input map must be {(self.n, self.m)}, got {self.g_const.shape}")
        if self.g_perp_const.shape != (self.n - self.m, self.n):
            raise ValueError("annihilator has the wrong shape")
        if np.any(self.g_perp_const @ self.g_const != 0.0):
            raise ValueError("g_perp is not an exact left-annihilator of g")
        if np.linalg.matrix_rank(self.G()) < self.n:
            raise ValueError("[g^T; g_perp] is singular")

    def f(self, x):
        return self.drift(x)

    def g(self, x=None):
        return self.g_const

    def g_perp(self, x=None):
        return self.g_perp_const

    def G(self, x=None):
        return np.concatenate([self.g_const.T, self.g_perp_const], axis=0)

    @property
    def lo(self):
        return self.box[0]

    @property
    def hi(self):
        return self.box[1]


@dataclass
class MechanicalPH:
    """``H(q, p) = p^T M(q)^{-1} p / 2 + U(q)`` for two degrees of freedom."""

    mass: Callable  # q -> (m11, m12, m22), generic ops on (B,) arrays
    potential: Callable  # q -> U, (B,)
    J: np.ndarray
    R: np.ndarray

    def hamiltonian(self, x):
        q = x[..., 0:2]
        p1, p2 = x[..., 2], x[..., 3]
        a, b, c = self.mass(q)
        det = a * c - b * b
        if np.any(value(det) <= 0.0):
            raise SingularMassError("singular mass matrix")
        kin = (c * p1 * p1 - 2.0 * b * p1 * p2 + a * p2 * p2) / det
        return 0.5 * kin + self.potential(q)

    def mass_matrix(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        a, b, c = self.mass(q)
        return np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)

    def drift(self, x):
        return ph_drift(self.J, self.R, self.hamiltonian, x)


def ph_drift(J, R, H, x):
    """``(J - R) grad H(x)`` for constant ``J``, ``R``."""
    gh = gradient_x(H, x)
    return gh @ np.asarray(J - R, dtype=np.float64).T


def grad_h_openloop(plant, x):
    mech = plant if isinstance(plant, MechanicalPH) else plant.params.get("mechanical")
    if mech is None:
        raise TypeError(f"plant {getattr(plant, 'name', plant)!r} has no Hamiltonian")
    return gradient_x(mech.hamiltonian, x)


def _canonical_J(k):
    z, i = np.zeros((k, k)), np.eye(k)
    return np.block([[z, i], [-i, z]])


def double_pendulum(m1=1.0, m2=1.0, l1=1.0, l2=1.0, gravity=GRAVITY, box=None):
    """Fully actuated double pendulum; ``q = 0`` is the upright position."""

    def mass(q):
        c12 = ops.cos(q[..., 0] - q[..., 1])
        return (m1 + m2) * l1 * l1 + 0.0 * c12, 0.5 * m2 * l1 * l2 * c12, m2 * l2 * l2 + 0.0 * c12

    def potential(q):
        return (1.0 + ops.cos(q[..., 0])) * gravity * (m1 * l1 + m2 * l1) + m2 * gravity * l2 * (
            1.0 + ops.cos(q[..., 1])
        )

    mech = MechanicalPH(mass, potential, _canonical_J(2), np.zeros((4, 4)))
    if box is None:
        box = ([-np.pi, -np.pi, -2.0, -2.0], [np.pi, np.pi, 2.0, 2.0])
    g = np.vstack([np.zeros((2, 2)), np.eye(2)])
    g_perp = np.hstack([np.eye(2), np.zeros((2, 2))])
    params = dict(m1=m1, m2=m2, l1=l1, l2=l2, gravity=gravity, mechanical=mech)
    return Plant("double_pendulum", 4, 2, mech.drift, g, g_perp, np.zeros(4), box, params, mech.hamiltonian)


def cartpole(m1=1.0, m2=1.0, l2=1.0, gravity=GRAVITY, box=None):
    """Inverted pendulum on a cart; ``q1`` cart position, ``q2`` pole angle (0 upright)."""

    def mass(q):
        c2 = ops.cos(q[..., 1])
        return (m1 + m2) + 0.0 * c2, 0.5 * m2 * l2 * c2, m2 * l2 * l2 + 0.0 * c2

    def potential(q):
        return m2 * gravity * l2 * (1.0 + ops.cos(q[..., 1]))

    mech = MechanicalPH(mass, potential, _canonical_J(2), np.zeros((4, 4)))
    if box is None:
        box = ([-2.0, -np.pi, -2.0, -2.0], [2.0, np.pi, 2.0, 2.0])
    g = np.array([[0.0], [0.0], [1.0], [0.0]])
    g_perp = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 0, 1.0]])
    params = dict(m1=m1, m2=m2, l2=l2, gravity=gravity, mechanical=mech)
    return Plant("cartpole", 4, 1, mech.drift, g, g_perp, np.zeros(4), box, params, mech.hamiltonian)


def msd(m=1.0, k=1.0, b=0.5, x_star=(0.5, 0.0), box=None):
    """Mass-spring-damper with a softening spring and nonlinear damping (not port-Hamiltonian)."""

    def drift(x):
        q, p = x[..., 0], x[..., 1]
        dq = p
        dp = -(k + 0.5 * q * q) * q / m - b * p * (1.0 + ops.abs(p)) * p / m
        return ops.stack([dq, dp], axis=-1)

    if box is None:
        box = ([-1.0, -2.0], [2.0, 2.0])
    params = dict(m=m, k=k, b=b)
    return Plant("msd", 2, 1, drift, [[0.0], [1.0]], [[1.0, 0.0]], x_star, box, params)


BENCHMARKS = {"double_pendulum": double_pendulum, "cartpole": cartpole, "msd": msd}


def make_plant(name, **overrides):
    """Benchmark by name; keyword overrides go to the physical parameters or ``box``."""
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    return BENCHMARKS[name](**overrides)


def in_box(plant, x, scale=1.0):
    """Whether states lie in the domain box scaled by ``scale`` about its centre."""
    lo, hi = plant.box
    c, r = 0.5 * (lo + hi), 0.5 * (hi - lo) * scale
    x = np.asarray(x)
    return np.all((x >= c - r) & (x <= c + r), axis=-1)

