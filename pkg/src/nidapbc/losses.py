"""Physics-informed residuals, the sub-level switch and the adaptive multipliers.

Inside the sub-level set ``H~d < eps`` (``d = 0``) the loss pushes the
matching residual ``|mu|`` and its Jacobian to zero; outside (``d = 1``) it
asks for ``|xi| <= kappa |grad H~d|`` and ``sigma_min(R~d) >= kappa``.
Per-sample residuals are averaged over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import linalg
from .diffengine import no_grad, ops, value_and_jacobian_x
from .diffengine.dual import value


def switch_d(surrogates, x):
    """1 where ``H~d(x) >= eps`` (boundary included), else 0.  Not differentiated."""
    with no_grad():
        h = value(surrogates.hd(x))
    return (h >= surrogates.eps).astype(np.int64)


def _mu_program(cl):
    return lambda z: cl.evaluate(z).mu


def matching_terms(cl, x):
    """``(|mu|, |d mu/dx|_F)`` per sample, recorded for parameter gradients."""
    mu, jac = value_and_jacobian_x(_mu_program(cl), x)
    return ops.norm(mu, axis=-1), ops.frobenius(jac)


def dissipation_terms(cl, x, kappa=None):
    """Hinges ``max(0, |xi| - kappa |grad H~d|)`` and ``max(0, kappa - sigma_min(R~d))``."""
    kappa = cl.surrogates.kappa if kappa is None else kappa
    t = cl.evaluate(x)
    sd1 = ops.relu(ops.norm(t.xi, axis=-1) - kappa * ops.norm(t.grad_h, axis=-1))
    sd2 = ops.relu(kappa - linalg.min_eig(t.rd))
    return sd1, sd2


def _mask(d, x):
    return np.asarray(d, dtype=np.float64).reshape(np.shape(x)[:-1])


def residual_matching(cl, x, d):
    """``(1 - d) |mu(x)|``."""
    fm, _ = matching_terms(cl, x)
    return (1.0 - _mask(d, x)) * fm


def residual_grad_mismatch(cl, x, d):
    """``(1 - d) |d mu / dx|_F``."""
    _, fdm = matching_terms(cl, x)
    return (1.0 - _mask(d, x)) * fdm


def residual_sd(cl, x, d, kappa=None):
    """``(d * sd1, d * sd2)``."""
    sd1, sd2 = dissipation_terms(cl, x, kappa)
    m = _mask(d, x)
    return m * sd1, m * sd2


@dataclass
class ResidualBatch:
    f_m: np.ndarray
    f_dm: np.ndarray
    f_sd1: np.ndarray
    f_sd2: np.ndarray
    d: np.ndarray
    terms: tuple = None  # recorded batch means (f_m, f_dm, f_sd1, f_sd2) when built with gradients

    @property
    def means(self):
        return (
            float(np.mean(self.f_m)),
            float(np.mean(self.f_dm)),
            float(np.mean(self.f_sd1)),
            float(np.mean(self.f_sd2)),
        )

    @property
    def size(self):
        return len(self.d)


def compute_residuals(cl, x):
    """Evaluate all residuals on a batch, routing samples by ``d``.

    Second derivatives are only taken on the ``d = 0`` part and ``sigma_min``
    only on the ``d = 1`` part; the other residuals are identically zero there.
    Batch means divide by the full batch size.
    """
    x = np.asarray(x, dtype=np.float64)
    B = x.shape[0]
    d = switch_d(cl.surrogates, x)
    in0, in1 = np.flatnonzero(d == 0), np.flatnonzero(d == 1)
    per = {k: np.zeros(B) for k in ("f_m", "f_dm", "f_sd1", "f_sd2")}
    terms = [0.0, 0.0, 0.0, 0.0]
    if in0.size:
        fm, fdm = matching_terms(cl, x[in0])
        per["f_m"][in0], per["f_dm"][in0] = value(fm), value(fdm)
        terms[0], terms[1] = ops.sum(fm) / B, ops.sum(fdm) / B
    if in1.size:
        sd1, sd2 = dissipation_terms(cl, x[in1])
        per["f_sd1"][in1], per["f_sd2"][in1] = value(sd1), value(sd2)
        terms[2], terms[3] = ops.sum(sd1) / B, ops.sum(sd2) / B
    return ResidualBatch(per["f_m"], per["f_dm"], per["f_sd1"], per["f_sd2"], d, tuple(terms))


@dataclass(frozen=True)
class AdaptiveWeights:
    r_m: float = 1.0
    r_dm: float = 1.0
    r_sd: float = 1.0
    gamma: float = 0.9999
    alpha: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if min(self.r_m, self.r_dm, self.r_sd) < 0.0:
            raise ValueError("multipliers must be non-negative")

    def as_tuple(self):
        return (self.r_m, self.r_dm, self.r_sd)


def total_loss(batch, w):
    """``r_m f_m + r_dm f_dm + r_sd (f_sd1 + f_sd2)`` on batch means.

    Accepts a :class:`ResidualBatch` (uses the recorded means when present) or a
    plain 4-tuple of means.
    """
    if isinstance(batch, ResidualBatch):
        fm, fdm, sd1, sd2 = batch.terms if batch.terms is not None else batch.means
    else:
        fm, fdm, sd1, sd2 = batch
    return w.r_m * fm + w.r_dm * fdm + w.r_sd * (sd1 + sd2)


def update_weights(w, f_m, f_dm, f_sd):
    """``r_i <- gamma r_i + alpha f_i / max_j f_j`` over the groups m, dm, sd."""
    f = (float(f_m), float(f_dm), float(f_sd))
    top = max(f)
    inc = [w.alpha * fi / top for fi in f] if top > 0.0 else [0.0, 0.0, 0.0]
    return replace(
        w,
        r_m=w.gamma * w.r_m + inc[0],
        r_dm=w.gamma * w.r_dm + inc[1],
        r_sd=w.gamma * w.r_sd + inc[2],
    )
