import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import MSD_P
from nidapbc.diffengine import no_grad, value
from nidapbc.simulation import (
    SimulationError,
    Trajectory,
    certify_dissipation,
    clamp_for_output,
    format_report,
    integrate,
    linearized_stability_check,
    rk4_step,
    run_certification,
    simulate,
    write_trajectory_csv,
)


# -- integrator ------------------------------------------------------------------------
def test_rk4_single_step_exponential():
    x = rk4_step(lambda z: -z, np.array([1.0]), 0.1)
    assert abs(x[0] - np.exp(-0.1)) < 1e-7
    assert x[0] == pytest.approx(0.9048375, abs=1e-7)


def test_rk4_zero_field():
    x0 = np.array([0.3, -2.0])
    np.testing.assert_array_equal(rk4_step(lambda z: 0 * z, x0, 0.5), x0)


def test_rk4_fourth_order_convergence():
    errs = []
    for h in (0.1, 0.05, 0.025):
        _, xs = integrate(lambda z: -z, np.array([1.0]), 1.0, h)
        errs.append(abs(xs[-1, 0] - np.exp(-1.0)))
    for a, b in zip(errs, errs[1:]):
        assert 16 * 0.7 <= a / b <= 16 * 1.3


def test_rk4_non_finite_stage_raises():
    with pytest.raises(SimulationError, match="state"):
        rk4_step(lambda z: np.full_like(z, np.nan), np.ones(2), 0.1)


# -- clamp -----------------------------------------------------------------------------
def test_clamp_examples():
    np.testing.assert_array_equal(clamp_for_output([1.0, 1e-7, 5.0], 1e-6), [1.0, 1e-6, 1e-6])
    np.testing.assert_array_equal(clamp_for_output([3.0, 2.0, 1.0]), [3.0, 2.0, 1.0])
    raw = np.array([1.0, 1e-9])
    clamp_for_output(raw)
    np.testing.assert_array_equal(raw, [1.0, 1e-9])
    with pytest.raises(ValueError):
        clamp_for_output(raw, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_clamp_property(series):
    out = clamp_for_output(series, 1e-6)
    hit = [i for i, s in enumerate(series) if s < 1e-6]
    first = hit[0] if hit else len(series)
    assert list(out[:first]) == series[:first]
    assert np.all(out[first:] == 1e-6)


# -- closed-loop simulation ------------------------------------------------------------
def test_equilibrium_preserved(exact_msd):
    (tr,) = simulate(exact_msd, exact_msd.plant.x_star, T=2.0, h=0.01)
    assert np.max(np.linalg.norm(tr.x - exact_msd.plant.x_star, axis=1)) <= 1e-6
    assert tr.t_enter == 0.0


def test_time_grid_and_entry_marker(exact_msd):
    (tr,) = simulate(exact_msd, [[1.8, 1.5]], T=10.0, h=0.01, check_every=50)
    np.testing.assert_allclose(np.diff(tr.t), 0.01, rtol=1e-12)
    assert np.all(np.diff(tr.t) > 0)
    k = int(np.flatnonzero(tr.t == tr.t_enter)[0])
    assert tr.hd[k] < tr.eps and np.all(tr.hd[:k] >= tr.eps)
    assert np.array_equal(tr.d, (tr.hd >= tr.eps).astype(int))
    assert not tr.exited
    assert np.linalg.norm(tr.x[-1] - exact_msd.plant.x_star) <= 1e-3


def test_energy_decreases_where_margin_positive(exact_msd):
    x0 = np.random.default_rng(0).uniform(exact_msd.plant.lo, exact_msd.plant.hi, size=(5, 2))
    for tr in simulate(exact_msd, x0, T=5.0, h=0.01):
        pos = tr.margin[:-1] > 0
        assert np.all(np.diff(tr.hd)[pos] <= 1e-8)
        if tr.t_enter is not None:
            k = int(np.flatnonzero(tr.t == tr.t_enter)[0])
            assert np.all(np.diff(tr.hd[: k + 1]) < 1e-8)


def test_safety_box_exit_is_flagged(random_loop):
    far = random_loop.plant.hi * 9.5
    (tr,) = simulate(random_loop, far, T=50.0, h=0.05, safety_scale=1.0)
    assert tr.exited and tr.reason == "left safety box"
    assert len(tr.t) == 1


def test_simulate_rejects_bad_step(exact_msd):
    with pytest.raises(ValueError):
        simulate(exact_msd, exact_msd.plant.x_star, T=1.0, h=0.0)


def test_control_is_the_matching_input(exact_msd):
    (tr,) = simulate(exact_msd, [[1.0, -0.5]], T=0.05, h=0.01)
    with no_grad():
        t = exact_msd.evaluate(tr.x)
        np.testing.assert_array_equal(tr.u, value(t.beta))


# -- diagnostics -----------------------------------------------------------------------
def test_linearized_check_on_exact_fixture(exact_msd):
    rep = linearized_stability_check(exact_msd)
    J = np.array([[0.0, 2.0], [-2.0, 0.0]])
    np.testing.assert_allclose(rep.A, (J - np.eye(2)) @ MSD_P, atol=1e-8)
    assert rep.passed and np.all(rep.eigenvalues.real < 0)


def test_linearized_check_identity_case(exact_msd):
    tri = exact_msd.surrogates
    tri.mlp_j.biases[-1].data[:] = 0.0
    rep = linearized_stability_check(exact_msd)
    expected = np.sort(np.linalg.eigvals(-np.asarray(MSD_P)).real)
    np.testing.assert_allclose(np.sort(rep.eigenvalues.real), expected, atol=1e-8)


def test_linearized_check_fails_with_negative_damping(exact_msd):
    tri = exact_msd.surrogates
    tri.mlp_r.biases[-1].data[:] = [-3.0, 0.0, -3.0]
    with no_grad():
        R = value(tri.rd(tri.x_star[None]))[0]
    assert np.linalg.eigvalsh(R).min() < 0
    assert not linearized_stability_check(exact_msd).passed


def test_certify_exact_fixture_passes_with_quadratic_margin(exact_msd):
    rep = certify_dissipation(exact_msd, samples=2000, seed=1)
    assert rep.passed and rep.samples == 2000 and rep.eps == exact_msd.surrogates.eps
    X = np.random.default_rng(1).uniform(exact_msd.plant.lo, exact_msd.plant.hi, size=(2000, 2))
    with no_grad():
        gh = value(exact_msd.surrogates.grad_hd(X))
        d = value(exact_msd.surrogates.hd(X)) >= exact_msd.surrogates.eps
    bound = 1.0 * np.min(np.sum(gh[d] ** 2, axis=1))
    assert rep.min_margin >= bound - 1e-12


def test_certify_min_is_monotone_in_nested_samples(random_loop):
    X = np.random.default_rng(2).uniform(random_loop.plant.lo, random_loop.plant.hi, size=(800, random_loop.plant.n))
    random_loop.surrogates.eps = 1e-3
    mins = [certify_dissipation(random_loop, states=X[:k]).min_margin for k in (100, 200, 400, 800)]
    assert all(b <= a for a, b in zip(mins, mins[1:]))


def test_report_is_reproducible(exact_msd):
    a = format_report("msd", *run_certification(exact_msd, samples=500, seed=4), seed=4)
    b = format_report("msd", *run_certification(exact_msd, samples=500, seed=4), seed=4)
    assert a == b and a[1]
    assert "eps 0.1" in a[0] and "500 samples" in a[0]


def test_trajectory_csv(tmp_path, exact_msd):
    (tr,) = simulate(exact_msd, [[1.8, 1.5]], T=3.0, h=0.01)
    path = tmp_path / "t.csv"
    write_trajectory_csv(tr, path, {"benchmark": "msd", "seed": 0}, 2, 1)
    lines = path.read_text().splitlines()
    meta = [ln for ln in lines if ln.startswith("#")]
    assert "# t_E: " + repr(tr.t_enter) in meta
    rows = list(csv.DictReader(ln for ln in lines if not ln.startswith("#")))
    assert len(rows) == len(tr.t)
    assert list(rows[0]) == ["t", "x1", "x2", "u1", "H_d", "margin", "d", "H_d_clamped", "margin_clamped"]
    assert float(rows[-1]["H_d"]) == tr.hd[-1]


def test_t_enter_none_when_never_inside():
    tr = Trajectory(np.arange(3.0), np.zeros((3, 1)), np.zeros((3, 1)), np.ones(3), np.ones(3), np.ones(3, int), 0.5)
    assert tr.t_enter is None
