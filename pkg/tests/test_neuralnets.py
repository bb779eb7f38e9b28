import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import SMALL, small_triple
from nidapbc import linalg
from nidapbc.diffengine import Tensor, gradient_x, hessian_x, no_grad, ops, value
from nidapbc.neuralnets import (
    IcnnParams,
    MinimizerError,
    MlpParams,
    StaleMinimizerError,
    SurrogateTriple,
    find_icnn_min,
    icnn_forward,
    jd_tilde,
    rd_tilde,
    skew_reconstruct,
    sym_reconstruct,
)
from nidapbc.plant import make_plant


# -- reconstruction maps ----------------------------------------------------------------
def test_skew_examples():
    np.testing.assert_array_equal(skew_reconstruct(np.zeros(1), 2), np.zeros((2, 2)))
    np.testing.assert_array_equal(skew_reconstruct(np.array([1.5]), 2), [[0, 1.5], [-1.5, 0]])
    np.testing.assert_array_equal(
        skew_reconstruct(np.array([1.0, 2.0, 3.0]), 3), [[0, 1, 2], [-1, 0, 3], [-2, -3, 0]]
    )


def test_sym_examples():
    np.testing.assert_array_equal(sym_reconstruct(np.zeros(3), 2), np.zeros((2, 2)))
    np.testing.assert_array_equal(sym_reconstruct(np.array([1.0, 2.0, 3.0]), 2), [[1, 2], [2, 3]])


@pytest.mark.parametrize("fn,n,bad", [(skew_reconstruct, 3, 4), (sym_reconstruct, 4, 9), (skew_reconstruct, 2, 0)])
def test_wrong_length_is_a_dimension_error(fn, n, bad):
    with pytest.raises(ValueError, match="needs"):
        fn(np.zeros(bad), n)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (10,), elements=st.floats(-1e6, 1e6)))
def test_sym_is_exactly_symmetric_n4(v):
    M = sym_reconstruct(v, 4)
    assert np.array_equal(M, M.T)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6,), elements=st.floats(-1e6, 1e6)))
def test_skew_is_exactly_skew_n4(v):
    S = skew_reconstruct(v, 4)
    assert np.array_equal(S + S.T, np.zeros((4, 4)))


# -- structured networks ---------------------------------------------------------------
@pytest.fixture
def triple4():
    return small_triple(make_plant("double_pendulum"), seed=11)


def test_jd_is_skew_and_state_dependent(triple4):
    rng = np.random.default_rng(0)
    with no_grad():
        J = jd_tilde(triple4, rng.uniform(-2, 2, size=(200, 4)))
    assert np.array_equal(J + np.swapaxes(J, -1, -2), np.zeros_like(J))
    assert not np.allclose(J[0], J[1])


def test_jd_zero_output_layer_gives_zero(triple4):
    mlp = triple4.mlp_j
    mlp.weights[-1] = Tensor(np.zeros_like(mlp.weights[-1].data))
    mlp.biases[-1] = Tensor(np.zeros_like(mlp.biases[-1].data))
    with no_grad():
        np.testing.assert_array_equal(jd_tilde(triple4, np.ones((3, 4))), 0.0)


def test_rd_symmetric_and_zero_output_gives_rho_identity(triple4):
    rng = np.random.default_rng(1)
    with no_grad():
        R = rd_tilde(triple4, rng.normal(size=(100, 4)))
        assert np.array_equal(R, np.swapaxes(R, -1, -2))
        mlp = triple4.mlp_r
        mlp.weights[-1] = Tensor(np.zeros_like(mlp.weights[-1].data))
        mlp.biases[-1] = Tensor(np.zeros_like(mlp.biases[-1].data))
        R0 = rd_tilde(triple4, rng.normal(size=(2, 4)), rho=0.7)
    np.testing.assert_array_equal(R0, np.broadcast_to(0.7 * np.eye(4), (2, 4, 4)))
    np.testing.assert_array_equal(linalg.eigh(R0)[0], 0.7)


def test_rd_weyl_bound(triple4):
    X = np.random.default_rng(2).normal(size=(500, 4))
    with no_grad():
        S = value(triple4.rd_sym_part(X))
        R = value(triple4.rd(X))
    assert np.all(linalg.min_eig(R) >= triple4.rho - linalg.spectral_norm(S) - 1e-12)


def test_icnn_single_passthrough_layer_is_affine():
    rng = np.random.default_rng(3)
    ic = IcnnParams.init(2, (4,), rng, quad_scale=0.0, floor=0.0)
    ic.raw_hidden[-1] = Tensor(np.full_like(ic.raw_hidden[-1].data, -1000.0))
    with no_grad():
        a, b = rng.normal(size=(2, 2))
        mid = icnn_forward(ic, (0.3 * a + 0.7 * b)[None])[0]
        lin = 0.3 * icnn_forward(ic, a[None])[0] + 0.7 * icnn_forward(ic, b[None])[0]
    assert mid == pytest.approx(lin, abs=1e-12)


def test_icnn_effective_weights_nonnegative():
    ic = IcnnParams.init(3, SMALL, np.random.default_rng(4))
    for u in ic.raw_hidden:
        u.data = u.data - 50.0  # drive raw weights far negative
    assert all(np.all(value(w) >= 0.0) for w in ic.effective_hidden())


def test_icnn_hessian_psd_at_random_points():
    rng = np.random.default_rng(5)
    ic = IcnnParams.init(4, SMALL, rng)
    with no_grad():
        H = np.asarray(hessian_x(ic, rng.uniform(-3, 3, size=(100, 4))))
    assert np.linalg.eigvalsh(H).min() >= -1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_icnn_midpoint_convexity(seed):
    rng = np.random.default_rng(seed)
    ic = IcnnParams.init(3, (8, 8), np.random.default_rng(seed % 7))
    a, b = rng.uniform(-4, 4, size=(2, 64, 3))
    with no_grad():
        fa, fb, fm = ic(a), ic(b), ic(0.5 * (a + b))
    assert np.all(fm <= 0.5 * (fa + fb) + 1e-10)


# -- minimiser ------------------------------------------------------------------------------
def test_find_min_of_shifted_quadratic():
    c = np.array([0.3, -0.2])
    prog = lambda x: ops.sum((x - c) * (x - c), axis=-1)  # noqa: E731
    x = find_icnn_min(prog, (np.array([-1.0, -1.0]), np.array([1.0, 1.0])), tol=1e-8)
    np.testing.assert_allclose(x, c, atol=1e-8)


def test_find_min_affine_lands_on_boundary():
    slope = np.array([-1.0, 2.0])
    prog = lambda x: ops.sum(x * slope, axis=-1)  # noqa: E731
    x = find_icnn_min(prog, (np.array([-1.0, -1.0]), np.array([1.0, 1.0])), tol=1e-8)
    np.testing.assert_array_equal(x, [1.0, -1.0])


def test_find_min_random_icnn_beats_probes():
    rng = np.random.default_rng(6)
    ic = IcnnParams.init(3, SMALL, rng)
    box = (np.full(3, -2.0), np.full(3, 2.0))
    with no_grad():
        x = find_icnn_min(ic, box, tol=1e-8)
        probes = rng.uniform(-2, 2, size=(1000, 3))
        assert np.all(value(ic(x[None]))[0] <= value(ic(probes)) + 1e-12)


def test_find_min_reports_non_convergence():
    prog = lambda x: ops.sum(ops.exp(x), axis=-1)  # noqa: E731
    with pytest.raises(MinimizerError) as info:
        find_icnn_min(prog, None, x0=np.zeros(1), tol=1e-8, max_iters=3)
    assert info.value.x.shape == (1,)
    assert info.value.grad_norm > 0


def test_find_min_rejects_empty_box():
    with pytest.raises(ValueError):
        find_icnn_min(lambda x: ops.sum(x, axis=-1), (np.ones(2), np.zeros(2)))


# -- shifted energy -----------------------------------------------------------------------
def _quadratic_triple(x_star):
    plant = make_plant("msd", x_star=x_star)
    tri = small_triple(plant)
    tri.icnn = lambda x: ops.sum(x * x, axis=-1)  # ||x||^2 with minimiser 0
    tri.refresh_minimizer(np.array([0.4, -0.3]))
    return tri


def test_hd_quadratic_examples():
    tri = _quadratic_triple((1.0, 0.0))
    np.testing.assert_allclose(tri.x_hat, 0.0, atol=1e-12)
    tri.x_hat = np.zeros(2)
    with no_grad():
        assert tri.hd(np.array([[1.0, 0.0]]))[0] == 0.0
        assert tri.hd(np.array([[2.0, 0.0]]))[0] == 1.0
        np.testing.assert_array_equal(tri.grad_hd(np.array([[2.0, 0.0]])), [[2.0, 0.0]])


def test_hd_zero_at_target_and_nonnegative():
    plant = make_plant("cartpole")
    tri = small_triple(plant, seed=7)
    X = np.random.default_rng(8).uniform(-4, 4, size=(10_000, 4))
    with no_grad():
        assert value(tri.hd(plant.x_star[None]))[0] == 0.0
        assert value(tri.hd(X)).min() >= -1e-6
        assert np.linalg.norm(tri.grad_hd(plant.x_star[None])) <= 1e-6


def test_grad_hd_matches_finite_differences():
    plant = make_plant("double_pendulum")
    tri = small_triple(plant, seed=9)
    rng = np.random.default_rng(10)
    with no_grad():
        for x in rng.uniform(-2, 2, size=(10, 4)):
            g = np.asarray(tri.grad_hd(x[None]))[0]
            fd = np.zeros(4)
            for i in range(4):
                e = np.zeros(4)
                e[i] = 1e-5
                fd[i] = (value(tri.hd((x + e)[None]))[0] - value(tri.hd((x - e)[None]))[0]) / 2e-5
            assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


def test_stale_minimizer_raises():
    plant = make_plant("msd")
    tri = small_triple(plant)
    tri.mark_updated()
    with pytest.raises(StaleMinimizerError):
        tri.hd(np.zeros((1, 2)))
    tri.refresh_minimizer()
    tri.hd(np.zeros((1, 2)))


def test_kappa_must_lie_below_rho():
    plant = make_plant("msd")
    with pytest.raises(ValueError, match="kappa"):
        SurrogateTriple.init(2, plant.x_star, np.random.default_rng(0), hidden=SMALL, rho=1.0, kappa=1.0)


def test_mlp_shapes():
    mlp = MlpParams.init((4, 300, 300, 300, 6), np.random.default_rng(0))
    assert [w.data.shape for w in mlp.weights] == [(4, 300), (300, 300), (300, 300), (300, 6)]
    assert len(mlp.parameters()) == 8


def test_structure_holds_for_fresh_initializations():
    plant = make_plant("msd")
    X = np.random.default_rng(12).uniform(plant.lo, plant.hi, size=(1000, 2))
    for seed in range(5):
        tri = small_triple(plant, seed=seed)
        with no_grad():
            H = np.asarray(hessian_x(tri.hd, X))
            assert np.linalg.eigvalsh(H).min() >= -1e-8
            assert value(tri.hd(plant.x_star[None]))[0] == 0.0
            assert np.linalg.norm(gradient_x(tri.hd, plant.x_star)) <= 1e-6


@pytest.mark.parametrize("n,hidden", [(2, (16, 16)), (4, (32, 32, 32)), (3, (7,))])
def test_closed_form_icnn_hessian_matches_nested_ad(n, hidden):
    rng = np.random.default_rng(n)
    ic = IcnnParams.init(n, hidden, rng)
    ic.quad.data = rng.normal(size=(n, n))
    ic.passthrough[-1].data *= 30.0
    X = rng.uniform(-3, 3, size=(50, n))
    with no_grad():
        ad = np.asarray(value(hessian_x(ic, X)))
    np.testing.assert_allclose(ic.hessian(X), ad, rtol=0, atol=1e-12)


def test_hessian_hd_is_shifted_icnn_hessian():
    plant = make_plant("cartpole")
    tri = small_triple(plant, seed=13)
    X = np.random.default_rng(14).uniform(plant.lo, plant.hi, size=(20, 4))
    with no_grad():
        ad = np.asarray(value(hessian_x(tri.hd, X)))
    np.testing.assert_allclose(tri.hessian_hd(X), ad, rtol=0, atol=1e-12)
