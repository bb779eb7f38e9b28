"""Shared fixtures builders for the test-suite."""
import numpy as np

from nidapbc.control import ClosedLoop
from nidapbc.diffengine import Tensor
from nidapbc.neuralnets import IcnnParams, MlpParams, SurrogateTriple, n_skew, n_sym
from nidapbc.plant import make_plant

SMALL = (16, 16)


def small_triple(plant, seed=0, hidden=SMALL, **kw):
    rng = np.random.default_rng(seed)
    tri = SurrogateTriple.init(plant.n, plant.x_star, rng, hidden=hidden, **kw)
    tri.refresh_minimizer()
    return tri


def _constant_mlp(n, out_bias, hidden=SMALL, seed=0):
    rng = np.random.default_rng(seed)
    mlp = MlpParams.init((n,) + hidden + (len(out_bias),), rng)
    mlp.weights[-1] = Tensor(np.zeros_like(mlp.weights[-1].data))
    mlp.biases[-1] = Tensor(np.asarray(out_bias, dtype=np.float64))
    return mlp


def quadratic_icnn(P, floor=1e-2, hidden=SMALL, seed=0):
    """ICNN whose output is exactly ``x^T P x / 2`` (all network terms switched off)."""
    n = P.shape[0]
    ic = IcnnParams.init(n, hidden, np.random.default_rng(seed), floor=floor)
    ic.raw_hidden[-1] = Tensor(np.full_like(ic.raw_hidden[-1].data, -1000.0))
    ic.passthrough[-1] = Tensor(np.zeros_like(ic.passthrough[-1].data))
    ic.biases[-1] = Tensor(np.zeros(1))
    ic.quad = Tensor(np.linalg.cholesky(P - floor * np.eye(n)))
    return ic


MSD_P = np.array([[2.0, 1.0], [1.0, 1.0]])


def exact_msd_triple(rho=1.0, eps=0.1):
    """Surrogates solving the MSD matching equation exactly.

    ``H~d = (x - x*)^T P (x - x*) / 2`` with ``P = [[2, 1], [1, 1]]``, ``J~d = [[0, 2], [-2, 0]]``
    and ``R~d = I``: the first row of ``(J~d - R~d) P`` is ``(0, 1)``, reproducing ``q' = p``.
    """
    plant = make_plant("msd")
    tri = SurrogateTriple(
        2,
        _constant_mlp(2, [2.0]),
        _constant_mlp(2, np.zeros(n_sym(2))),
        quadratic_icnn(MSD_P),
        rho,
        eps,
        0.9 * rho,
        plant.x_star,
    )
    tri.refresh_minimizer()
    return plant, tri


# PASS/FAIL lines from the acceptance suite, printed in the terminal summary
ACCEPTANCE = []
