"""Closed-loop integration and the diagnostic battery run on trained surrogates."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .control import ClosedLoop, prop2_residual
from .diffengine import no_grad, value_and_jacobian_x
from .diffengine.dual import value
from .losses import switch_d
from .plant import in_box

CLAMP_THRESHOLD = 1e-6


class SimulationError(FloatingPointError):
    def __init__(self, msg, state):
        super().__init__(f"{msg}; state {np.array2string(np.asarray(state), precision=6)}")
        self.state = state


def rk4_step(field, x, h):
    """One classical Runge-Kutta step of ``x' = field(x)``."""
    x = np.asarray(x, dtype=np.float64)
    k1 = np.asarray(field(x))
    k2 = np.asarray(field(x + 0.5 * h * k1))
    k3 = np.asarray(field(x + 0.5 * h * k2))
    k4 = np.asarray(field(x + h * k3))
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise SimulationError("non-finite RK4 stage", x)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(field, x0, T, h):
    """Fixed-step RK4 over ``[0, T]``; returns the grid and the states on it."""
    steps = int(round(T / h))
    x = np.asarray(x0, dtype=np.float64)
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    for k in range(steps):
        x = rk4_step(field, x, h)
        out[k + 1] = x
    return h * np.arange(steps + 1), out


def clamp_for_output(series, threshold=CLAMP_THRESHOLD):
    """Report every value from the first one below ``threshold`` onwards as ``threshold``."""
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    s = np.array(series, dtype=np.float64)
    below = np.flatnonzero(s < threshold)
    if below.size:
        s[below[0] :] = threshold
    return s


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray  # (K, n)
    u: np.ndarray  # (K, m)
    hd: np.ndarray
    margin: np.ndarray
    d: np.ndarray
    eps: float
    exited: bool = False
    reason: str = ""

    @property
    def t_enter(self):
        """First grid time with ``H~d < eps``, or None."""
        idx = np.flatnonzero(self.hd < self.eps)
        return float(self.t[idx[0]]) if idx.size else None

    def hd_clamped(self, threshold=CLAMP_THRESHOLD):
        return clamp_for_output(self.hd, threshold)

    def margin_clamped(self, threshold=CLAMP_THRESHOLD):
        return clamp_for_output(self.margin, threshold)


def _field_and_diagnostics(cl, x):
    t = cl.evaluate(x)
    g = cl.plant.g(x)
    field = value(t.closed_loop(g))
    diag = dict(u=value(t.beta), margin=value(t.margin()))
    return field, diag


def simulate(cl, x0, T=10.0, h=0.01, safety_scale=10.0, check_every=0, identity_tol=1e-8):
    """Integrate the closed loop from one or several initial states.

    Trajectories leaving the domain box scaled by ``safety_scale`` (or turning
    non-finite) stop early and are flagged.  With ``check_every > 0`` the
    closed-loop decomposition identity is re-checked at that grid cadence.
    """
    if T <= 0.0 or h <= 0.0:
        raise ValueError("T and h must be positive")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    B, n = x0.shape
    tri = cl.surrogates
    steps = int(round(T / h))
    K = steps + 1
    xs = np.full((B, K, n), np.nan)
    us = np.full((B, K, cl.plant.m), np.nan)
    hds = np.full((B, K), np.nan)
    margins = np.full((B, K), np.nan)
    length = np.full(B, K)
    reason = [""] * B

    def field(z):
        return _field_and_diagnostics(cl, z)[0]

    alive = np.arange(B)
    x = x0.copy()
    with no_grad():
        for k in range(K):
            f, diag = _field_and_diagnostics(cl, x)
            xs[alive, k] = x
            us[alive, k] = diag["u"]
            margins[alive, k] = diag["margin"]
            hds[alive, k] = value(tri.hd(x))
            if check_every and k % check_every == 0:
                gap = prop2_residual(cl, x)
                if np.any(gap > identity_tol):
                    raise SimulationError(f"closed-loop identity violated by {gap.max():.3e}", x)
            if k == steps:
                break
            with np.errstate(all="ignore"):
                k1 = f
                k2 = field(x + 0.5 * h * k1)
                k3 = field(x + 0.5 * h * k2)
                k4 = field(x + h * k3)
                xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            finite = np.all(np.isfinite(xn), axis=1)
            inside = finite & in_box(cl.plant, np.where(finite[:, None], xn, 0.0), safety_scale)
            for i in np.flatnonzero(~inside):
                b = alive[i]
                length[b] = k + 1
                reason[b] = "non-finite state" if not finite[i] else "left safety box"
            alive, x = alive[inside], xn[inside]
            if alive.size == 0:
                break
    t = h * np.arange(K)
    out = []
    for b in range(B):
        L = length[b]
        d = (hds[b, :L] >= tri.eps).astype(np.int64)
        out.append(
            Trajectory(t[:L], xs[b, :L], us[b, :L], hds[b, :L], margins[b, :L], d, tri.eps, L < K, reason[b])
        )
    return out


def simulate_open_loop(plant, x0, T=1.0, h=1e-3):
    """Integrate the uncontrolled plant (``u = 0``)."""
    with no_grad():
        return integrate(lambda z: value(plant.f(z)), np.atleast_2d(x0), T, h)


# -- diagnostics -----------------------------------------------------------------
@dataclass
class StabilityReport:
    A: np.ndarray
    eigenvalues: np.ndarray
    passed: bool


def linearized_stability_check(cl):
    """Eigenvalues of ``(J~d - R~d) Hess H~d`` at the target; PASS if all real parts are negative."""
    tri = cl.surrogates
    xs = tri.x_star[None]
    with no_grad():
        J, R = value(tri.jd(xs))[0], value(tri.rd(xs))[0]
        H = np.asarray(value(tri.hessian_hd(xs)))[0]
    A = (J - R) @ H
    ev = np.linalg.eigvals(A)
    return StabilityReport(A, ev, bool(np.all(ev.real < 0.0)))


def _quantiles(a, qs):
    if a.size == 0:
        return {q: float("nan") for q in qs}
    return {q: float(np.quantile(a, q)) for q in qs}


QUANTILES = (0.0, 0.01, 0.05, 0.5, 0.95, 0.99, 1.0)


@dataclass
class DissipationReport:
    samples: int
    eps: float
    seed: int
    n_dissipation: int
    n_sublevel: int
    margin: np.ndarray
    mu_norm: np.ndarray
    dmu_norm: np.ndarray
    passed: bool
    quantiles: dict = field(default_factory=dict)

    @property
    def min_margin(self):
        return float(self.margin.min()) if self.margin.size else float("nan")


def certify_dissipation(cl, samples=10000, seed=0, chunk=2048, states=None):
    """Sample the domain; margin statistics where ``d = 1`` and mismatch statistics where ``d = 0``."""
    if states is None:
        rng = np.random.default_rng(seed)
        states = rng.uniform(cl.plant.lo, cl.plant.hi, size=(samples, cl.plant.n))
    states = np.asarray(states, dtype=np.float64)
    margins, mus, dmus = [], [], []
    with no_grad():
        for s in range(0, len(states), chunk):
            X = states[s : s + chunk]
            d = switch_d(cl.surrogates, X)
            if np.any(d == 1):
                margins.append(value(cl.evaluate(X[d == 1]).margin()))
            if np.any(d == 0):
                mu, jac = value_and_jacobian_x(lambda z: cl.evaluate(z).mu, X[d == 0])
                mus.append(np.linalg.norm(value(mu), axis=-1))
                dmus.append(np.linalg.norm(value(jac), axis=(-2, -1)))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)  # noqa: E731
    margin, mu, dmu = cat(margins), cat(mus), cat(dmus)
    passed = bool(margin.size == 0 or margin.min() > 0.0)
    q = {
        "margin": _quantiles(margin, QUANTILES),
        "mu_norm": _quantiles(mu, QUANTILES),
        "dmu_norm": _quantiles(dmu, QUANTILES),
    }
    return DissipationReport(len(states), cl.surrogates.eps, seed, margin.size, mu.size, margin, mu, dmu, passed, q)


@dataclass
class StructuralReport:
    skew_max: float
    sym_max: float
    weyl_violation: float
    hd_at_target: float
    grad_at_target: float
    hess_min_eig: float
    hd_min: float
    passed: bool


def structural_checks(cl, samples=1000, seed=0, grad_tol=1e-6, hess_tol=1e-8, hd_slack=1e-6):
    """Architecture-level guarantees evaluated on random states."""
    tri = cl.surrogates
    rng = np.random.default_rng(seed)
    X = rng.uniform(cl.plant.lo, cl.plant.hi, size=(samples, cl.plant.n))
    with no_grad():
        J = value(tri.jd(X))
        S = value(tri.rd_sym_part(X))
        R = S + tri.rho * np.eye(tri.n)
        skew = float(np.max(np.abs(J + np.swapaxes(J, -1, -2))))
        sym = float(np.max(np.abs(R - np.swapaxes(R, -1, -2))))
        smin = linalg.min_eig(R)
        bound = tri.rho - linalg.spectral_norm(S)
        weyl = float(np.max(bound - smin))
        xs = tri.x_star[None]
        h0 = float(value(tri.hd(xs))[0])
        g0 = float(np.linalg.norm(value(tri.grad_hd(xs))))
        H = np.asarray(value(tri.hessian_hd(X)))
        hmin = float(linalg.eigh(0.5 * (H + np.swapaxes(H, -1, -2)))[0][..., 0].min())
        hd_min = float(value(tri.hd(X)).min())
    passed = (
        skew == 0.0
        and sym == 0.0
        and weyl <= 1e-10
        and h0 == 0.0
        and g0 <= grad_tol
        and hmin >= -hess_tol
        and hd_min >= -hd_slack
    )
    return StructuralReport(skew, sym, weyl, h0, g0, hmin, hd_min, passed)


# -- output ------------------------------------------------------------------------
def write_trajectory_csv(traj, path, meta, n, m):
    """One row per grid point; ``#``-prefixed metadata rows first."""
    cols = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]
    cols += ["H_d", "margin", "d", "H_d_clamped", "margin_clamped"]
    hc, mc = traj.hd_clamped(), traj.margin_clamped()
    meta = dict(meta)
    meta["t_E"] = "none" if traj.t_enter is None else repr(traj.t_enter)
    meta["terminated_early"] = f"{traj.exited} {traj.reason}".strip()
    with open(path, "w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}: {v}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for k in range(len(traj.t)):
            row = [repr(float(traj.t[k]))]
            row += [repr(float(v)) for v in traj.x[k]] + [repr(float(v)) for v in traj.u[k]]
            row += [repr(float(traj.hd[k])), repr(float(traj.margin[k])), str(int(traj.d[k]))]
            row += [repr(float(hc[k])), repr(float(mc[k]))]
            wr.writerow(row)


def _fmt_quantiles(name, qd):
    head = "  " + f"{name:<10}" + "".join(f"{'q' + format(q, 'g'):>14}" for q in qd)
    vals = "  " + " " * 10 + "".join(f"{v:>14.6e}" for v in qd.values())
    return [head, vals]


def format_report(benchmark, structural, stability, dissipation, seed):
    lines = [f"benchmark: {benchmark}", f"seed: {seed}"]
    s = structural
    lines.append(
        f"{'PASS' if s.passed else 'FAIL'} structural: skew {s.skew_max:.3e} sym {s.sym_max:.3e} "
        f"weyl_violation {s.weyl_violation:.3e} H_d(x*) {s.hd_at_target:.3e} |grad H_d(x*)| {s.grad_at_target:.3e} "
        f"min_eig(Hess) {s.hess_min_eig:.3e} min H_d {s.hd_min:.3e}"
    )
    ev = ", ".join(f"{e.real:.6g}{e.imag:+.6g}j" for e in stability.eigenvalues)
    lines.append(f"{'PASS' if stability.passed else 'FAIL'} linearized stability: eigenvalues [{ev}]")
    d = dissipation
    lines.append(
        f"{'PASS' if d.passed else 'FAIL'} dissipation: min margin {d.min_margin:.6e} over {d.n_dissipation} "
        f"samples with d=1 (eps {d.eps:g}, {d.samples} samples, seed {d.seed})"
    )
    lines.append(f"sub-level samples (d=0): {d.n_sublevel}")
    for key in ("margin", "mu_norm", "dmu_norm"):
        lines += _fmt_quantiles(key, d.quantiles[key])
    overall = s.passed and stability.passed and d.passed
    lines.append(f"{'PASS' if overall else 'FAIL'} overall")
    return "\n".join(lines) + "\n", overall


def run_certification(cl: ClosedLoop, samples=10000, seed=0):
    structural = structural_checks(cl, samples=min(samples, 1000), seed=seed)
    stability = linearized_stability_check(cl)
    dissipation = certify_dissipation(cl, samples=samples, seed=seed)
    return structural, stability, dissipation
