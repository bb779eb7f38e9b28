"""Structured surrogates for the desired interconnection, damping and energy.

``J~d`` is an MLP whose output fills a skew-symmetric matrix, ``R~d`` an MLP
filling a symmetric matrix shifted by ``rho * I``, and ``H~d`` an input-convex
network re-centred so that its minimum sits at the target state.  Skewness,
symmetry and convexity hold for every parameter value.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffengine import Tensor, gradient_x, hessian_x, no_grad, ops
from .diffengine.dual import shape, value


class StaleMinimizerError(RuntimeError):
    """The cached ICNN minimiser was computed for different parameters."""


class MinimizerError(RuntimeError):
    """Convex descent did not converge."""

    def __init__(self, msg, x, grad_norm):
        super().__init__(f"{msg} (last iterate {np.array2string(x, precision=6)}, |grad|={grad_norm:.3e})")
        self.x = x
        self.grad_norm = grad_norm


# -- matrix reconstruction --------------------------------------------------
def n_skew(n: int) -> int:
    return n * (n - 1) // 2


def n_sym(n: int) -> int:
    return n * (n + 1) // 2


def _fill_matrix(n: int, skew: bool) -> np.ndarray:
    """Constant map from packed row-major upper-triangle entries to a flattened n x n matrix."""
    pairs = [(i, j) for i in range(n) for j in range(i + 1 if skew else i, n)]
    Q = np.zeros((len(pairs), n * n))
    for k, (i, j) in enumerate(pairs):
        Q[k, i * n + j] = 1.0
        Q[k, j * n + i] = -1.0 if skew else 1.0
    return Q


_FILL_CACHE: dict = {}


def _reconstruct(v, n, skew):
    need = n_skew(n) if skew else n_sym(n)
    s = tuple(shape(v))
    if not s or s[-1] != need:
        kind = "skew" if skew else "symmetric"
        raise ValueError(f"{kind} reconstruction for n={n} needs {need} entries, got {s[-1] if s else 0}")
    key = (n, skew)
    if key not in _FILL_CACHE:
        _FILL_CACHE[key] = _fill_matrix(n, skew)
    Q = _FILL_CACHE[key]
    if isinstance(v, np.ndarray) or not hasattr(v, "reshape"):
        v = np.asarray(v, dtype=np.float64)
    flat = ops.reshape(v, (-1, need)) @ Q if len(s) == 1 else v @ Q
    return ops.reshape(flat, s[:-1] + (n, n))


def skew_reconstruct(v, n: int):
    """Skew-symmetric ``n x n`` matrix from its strict upper triangle (row-major)."""
    return _reconstruct(v, n, skew=True)


def sym_reconstruct(v, n: int):
    """Symmetric ``n x n`` matrix from its upper triangle including the diagonal (row-major)."""
    return _reconstruct(v, n, skew=False)


# -- parameter containers ------------------------------------------------------
def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _softplus_inv(y):
    return np.log(np.expm1(y))


@dataclass
class MlpParams:
    """Fully connected tanh network; ``weights[i]`` has shape ``(widths[i], widths[i+1])``."""

    widths: tuple
    weights: list
    biases: list
    activation: str = "tanh"

    @classmethod
    def init(cls, widths, rng):
        widths = tuple(int(w) for w in widths)
        ws = [Tensor(_glorot(rng, a, b)) for a, b in zip(widths[:-1], widths[1:])]
        bs = [Tensor(np.zeros(b)) for b in widths[1:]]
        return cls(widths, ws, bs)

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x):
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = ops.tanh(h)
        return h


@dataclass
class IcnnParams:
    """Input-convex network with a convex quadratic skip term.

    ``z1 = softplus(x Wx0 + b0)``, ``z_{k+1} = softplus(z_k softplus(Uk) + x Wxk + bk)``
    and the output ``z_L softplus(u_out) + x wx_out + b_out + |x A|^2 / 2 + floor |x|^2 / 2``.
    The hidden-to-hidden weights go through softplus, so they are positive for
    any raw value; with convex non-decreasing activations the output is convex
    in ``x``.  The ``floor`` term makes it strongly convex, which guarantees a
    unique global minimiser.
    """

    n: int
    hidden: tuple
    passthrough: list  # (n, width) for every hidden layer and the output
    raw_hidden: list  # unconstrained, (width_k, width_{k+1}) incl. the output column
    biases: list
    quad: Tensor  # (n, n)
    floor: float = 1e-2
    activation: str = "softplus"

    @classmethod
    def init(cls, n, hidden, rng, hidden_scale=1.0, quad_scale=1.0, floor=1e-2):
        hidden = tuple(int(h) for h in hidden)
        outs = hidden + (1,)
        passthrough = [Tensor(_glorot(rng, n, w)) for w in outs]
        # output passthrough starts small so the initial minimiser sits near the origin
        passthrough[-1] = Tensor(passthrough[-1].data * 0.1)
        raw = []
        for a, b in zip(hidden[:-1] + (hidden[-1],), outs[1:]):
            eff = hidden_scale / a * rng.uniform(0.5, 1.5, size=(a, b))
            raw.append(Tensor(_softplus_inv(eff)))
        biases = [Tensor(np.zeros(w)) for w in outs]
        quad = Tensor(quad_scale * np.eye(n))
        return cls(n, hidden, passthrough, raw, biases, quad, floor)

    def parameters(self):
        return list(self.passthrough) + list(self.raw_hidden) + list(self.biases) + [self.quad]

    def effective_hidden(self):
        return [ops.softplus(u) for u in self.raw_hidden]

    def __call__(self, x):
        eff = self.effective_hidden()
        z = ops.softplus(x @ self.passthrough[0] + self.biases[0])
        for k in range(1, len(self.hidden)):
            z = ops.softplus(z @ eff[k - 1] + x @ self.passthrough[k] + self.biases[k])
        out = z @ eff[-1] + x @ self.passthrough[-1] + self.biases[-1]
        xa = x @ self.quad
        quad = 0.5 * ops.sum(xa * xa, axis=-1) + (0.5 * self.floor) * ops.sum(x * x, axis=-1)
        return ops.reshape(out, tuple(shape(out))[:-1]) + quad

    def hessian(self, x):
        """Exact Hessian ``(B, n, n)`` as plain arrays.

        Affine maps carry no curvature, so the Hessian is the sum over softplus
        units of ``adjoint * softplus''(pre) * grad(pre) grad(pre)^T`` plus the
        quadratic terms.  Costs about ``n + 2`` forward passes instead of the
        ``n^2`` directions of nested forward mode.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        P = [value(p) for p in self.passthrough]
        E = _eff_values(self.raw_hidden)
        b = [value(c) for c in self.biases]
        pre = [x @ P[0] + b[0]]
        jac = [np.broadcast_to(P[0], (x.shape[0],) + P[0].shape)]  # d pre / dx, (B, n, width)
        for k in range(1, len(self.hidden)):
            s = _sigmoid(pre[-1])
            z = np.logaddexp(0.0, pre[-1])
            pre.append(z @ E[k - 1] + x @ P[k] + b[k])
            prop = (jac[-1] * s[:, None, :]).reshape(-1, E[k - 1].shape[0]) @ E[k - 1]
            jac.append(prop.reshape(x.shape[0], self.n, -1) + P[k])
        adj = np.broadcast_to(E[-1][:, 0], pre[-1].shape)  # d out / d z_k
        A = value(self.quad)
        H = np.broadcast_to(A @ A.T + self.floor * np.eye(self.n), (x.shape[0], self.n, self.n)).copy()
        for k in range(len(pre) - 1, -1, -1):
            s = _sigmoid(pre[k])
            wj = jac[k] * (adj * s * (1.0 - s))[:, None, :]
            for i in range(self.n):
                for j in range(i, self.n):
                    hij = np.einsum("bh,bh->b", wj[:, i], jac[k][:, j])
                    H[:, i, j] += hij
                    if j != i:
                        H[:, j, i] += hij
            if k:
                adj = (adj * s) @ E[k - 1].T
        return H


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _eff_values(raw):
    return [np.logaddexp(0.0, value(u)) for u in raw]


# -- minimiser of a convex program ----------------------------------------------
def find_icnn_min(program, box=None, x0=None, tol=1e-8, max_iters=500):
    """Minimise a convex scalar program over a box (or all of R^n when ``box`` is None).

    Projected Newton with an Armijo backtracking line search; variables held at
    an active bound are excluded from the Newton system.  Terminates when the
    projected gradient has norm ``<= tol``.
    """
    if box is not None:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
        if np.any(hi < lo):
            raise ValueError("empty domain box")
    if x0 is None:
        x = 0.5 * (lo + hi) if box is not None else None
        if x is None:
            raise ValueError("x0 is required for an unbounded search")
    else:
        x = np.array(x0, dtype=np.float64)
    n = x.shape[0]

    def clip(z):
        return np.clip(z, lo, hi) if box is not None else z

    def f(z):
        return float(value(program(z[None]))[0])

    x = clip(x)
    gnorm = np.inf
    with no_grad():
        for _ in range(max_iters):
            fx = f(x)
            g = np.asarray(gradient_x(program, x), dtype=np.float64)
            pg = x - clip(x - g)
            gnorm = float(np.linalg.norm(pg))
            if gnorm <= tol:
                return x
            if box is not None:
                active = ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
            else:
                active = np.zeros(n, dtype=bool)
            free = ~active
            d = np.zeros(n)
            H = np.asarray(hessian_x(program, x), dtype=np.float64)
            try:
                d[free] = -np.linalg.solve(H[np.ix_(free, free)], g[free])
            except np.linalg.LinAlgError:
                d[free] = -g[free]
            if g @ d >= 0.0:
                d = np.where(free, -g, 0.0)
            t = 1.0
            slack = 1e-14 * (1.0 + abs(fx))
            while True:
                xn = clip(x + t * d)
                if f(xn) <= fx + 1e-4 * (g @ (xn - x)) + slack:
                    break
                t *= 0.5
                if t < 1e-14:
                    raise MinimizerError("line search failed", x, gnorm)
            x = xn
    raise MinimizerError(f"no convergence in {max_iters} iterations", x, gnorm)


# -- the surrogate triple --------------------------------------------------------
@dataclass
class SurrogateTriple:
    """``(J~d, R~d, H~d)`` with the constants that shape them."""

    n: int
    mlp_j: MlpParams
    mlp_r: MlpParams
    icnn: IcnnParams
    rho: float
    eps: float
    kappa: float
    x_star: np.ndarray
    x_hat: np.ndarray = None
    minimizer_tol: float = 1e-8
    minimizer_iters: int = 500
    meta: dict = field(default_factory=dict, repr=False)
    _version: int = field(default=0, repr=False)
    _hat_version: int = field(default=-1, repr=False)

    def __post_init__(self):
        self.x_star = np.asarray(self.x_star, dtype=np.float64)
        if not 0.0 < self.kappa < self.rho:
            raise ValueError(f"kappa must lie in (0, rho); got kappa={self.kappa}, rho={self.rho}")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")

    @classmethod
    def init(cls, n, x_star, rng, hidden=(300, 300, 300), rho=1.0, eps=0.1, kappa=None, **icnn_kw):
        kappa = 0.9 * rho if kappa is None else kappa
        mlp_j = MlpParams.init((n,) + tuple(hidden) + (n_skew(n),), rng)
        mlp_r = MlpParams.init((n,) + tuple(hidden) + (n_sym(n),), rng)
        icnn = IcnnParams.init(n, hidden, rng, **icnn_kw)
        return cls(n, mlp_j, mlp_r, icnn, rho, eps, kappa, x_star)

    # parameter bookkeeping
    def parameters(self):
        return self.mlp_j.parameters() + self.mlp_r.parameters() + self.icnn.parameters()

    def mark_updated(self):
        """Record that parameters changed; the cached minimiser becomes stale."""
        self._version += 1

    def refresh_minimizer(self, x0=None):
        if x0 is None:
            x0 = self.x_hat if self.x_hat is not None else np.zeros(self.n)
        self.x_hat = find_icnn_min(
            self.icnn, None, x0, tol=self.minimizer_tol, max_iters=self.minimizer_iters
        )
        self._hat_version = self._version
        return self.x_hat

    def _check_cache(self):
        if self.x_hat is None or self._hat_version != self._version:
            raise StaleMinimizerError("cached ICNN minimiser is stale; call refresh_minimizer()")

    # surrogate functions
    def jd(self, x):
        return skew_reconstruct(self.mlp_j(x), self.n)

    def rd(self, x):
        S = sym_reconstruct(self.mlp_r(x), self.n)
        return S + self.rho * np.eye(self.n)

    def rd_sym_part(self, x):
        return sym_reconstruct(self.mlp_r(x), self.n)

    def hd_hat(self, x):
        return self.icnn(x)

    def hd(self, x):
        """``H^(x - x* + x^) - H^(x^)``; zero at the target, non-negative, convex."""
        self._check_cache()
        shifted = x + (self.x_hat - self.x_star)
        return self.icnn(shifted) - self.icnn(self.x_hat[None])

    def grad_hd(self, x):
        return gradient_x(self.hd, x)

    def hessian_hd(self, x):
        if isinstance(self.icnn, IcnnParams):
            self._check_cache()
            return self.icnn.hessian(np.asarray(x, dtype=np.float64) + (self.x_hat - self.x_star))
        return hessian_x(self.hd, x)


def jd_tilde(triple, x):
    return triple.jd(x)


def rd_tilde(triple, x, rho=None):
    if rho is None:
        return triple.rd(x)
    return triple.rd_sym_part(x) + rho * np.eye(triple.n)


def icnn_forward(icnn, x):
    return icnn(x)


def hd_tilde(triple, x):
    return triple.hd(x)


def grad_hd_tilde(triple, x):
    return triple.grad_hd(x)
