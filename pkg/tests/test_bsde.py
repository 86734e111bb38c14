import numpy as np
import pytest

from pvi.bsde import (RegressionBasis, chain_expected_total, increasing_part_stats, solve_implicit,
                      solve_penalized_chain, solve_penalized_lsmc)
from pvi.errors import StepSizeError
from pvi.pde import closed_form_linear
from pvi.sde import TimeGrid, build_chain, simulate_paths

from conftest import make_spec


@pytest.fixture(scope="module")
def put_paths(put):
    return simulate_paths(put, 0.0, 100.0, TimeGrid(0, 1, 25), 20_000, seed=17)


def test_constant_terminal_lsmc():
    spec = make_spec(vol=0.3, terminal=lambda x: np.full(np.shape(x)[:-1], 7.0))
    ens = simulate_paths(spec, 0.0, 1.0, TimeGrid(0, 1, 10), 2000, seed=1)
    sol = solve_penalized_lsmc(ens, spec, alpha=50.0)
    assert sol.y0 == pytest.approx(7.0, abs=1e-10)
    np.testing.assert_allclose(sol.z, 0.0, atol=1e-8)
    assert np.all(sol.a == 0)


def test_chain_discounting_is_implicit_euler():
    r, n = 0.05, 50
    spec = make_spec(vol=0.2, driver=lambda t, x, y, z: -r * np.asarray(y), lip_g=r,
                     terminal=lambda x: np.ones(np.shape(x)[:-1]))
    ch = build_chain(spec, TimeGrid(0, 1, n), -2.0, 2.0, 40)
    u = solve_penalized_chain(spec, ch, alpha=0.0)
    np.testing.assert_allclose(u.values[0], (1 + r / n) ** -n, rtol=1e-12)
    assert u.values[0, 20] == pytest.approx(np.exp(-r), abs=r**2 / 50)


def test_lsmc_discounting():
    r = 0.05
    spec = make_spec(vol=0.2, driver=lambda t, x, y, z: -r * np.asarray(y), lip_g=r,
                     terminal=lambda x: np.ones(np.shape(x)[:-1]))
    ens = simulate_paths(spec, 0.0, 0.0, TimeGrid(0, 1, 50), 1000, seed=2)
    assert solve_penalized_lsmc(ens, spec, 0.0).y0 == pytest.approx(np.exp(-r), abs=1e-4)


def test_chain_martingale_terminal():
    spec = make_spec(vol=0.2, terminal=lambda x: np.asarray(x)[..., 0])
    ch = build_chain(spec, TimeGrid(0, 1, 10), -5.0, 5.0, 100)
    u = solve_penalized_chain(spec, ch, alpha=0.0)
    # constant extension only perturbs nodes the stencil can reach the edge from
    inner = slice(30, 71)
    np.testing.assert_allclose(u.values[0, inner], ch.x[inner], atol=1e-12)


def test_alpha_zero_is_unconstrained(put, linear):
    ch = build_chain(put, TimeGrid(0, 1, 200), 20.0, 300.0, 140)
    a = solve_penalized_chain(put, ch, 0.0)
    b = solve_penalized_chain(linear, ch, 0.0)
    assert np.array_equal(a.values, b.values)
    assert np.all(a.increments == 0)


def test_chain_matches_closed_form(linear):
    ch = build_chain(linear, TimeGrid(0, 1, 1000), 20.0, 300.0, 280)
    u0 = solve_penalized_chain(linear, ch, 0.0).value_at(100.0)
    ref = closed_form_linear({"rate": 0.05, "vol": 0.2, "strike": 100, "x0": 100, "T": 1})
    assert u0 == pytest.approx(ref, rel=5e-3)


def test_chain_penalty_gap_halves(put):
    ch = build_chain(put, TimeGrid(0, 1, 1000), 20.0, 300.0, 280)
    u0 = [solve_penalized_chain(put, ch, a).value_at(100.0) for a in (64, 128, 256)]
    assert u0[0] < u0[1] < u0[2]
    assert 0.3 <= (u0[2] - u0[1]) / (u0[1] - u0[0]) <= 0.7


def test_chain_expected_total_matches_paths(put):
    ch = build_chain(put, TimeGrid(0, 1, 200), 20.0, 300.0, 140)
    s = solve_penalized_chain(put, ch, 64.0)
    tot = chain_expected_total(ch, s.increments)
    assert np.all(tot >= 0)
    # far out of the money the constraint never binds
    assert tot[-1] < 1e-6
    assert tot[np.searchsorted(ch.x, 100.0)] > 0.1


def test_increasing_part_invariants(put, put_paths):
    sol = solve_penalized_lsmc(put_paths, put, 64.0)
    assert np.all(sol.a[:, 0] == 0)
    assert np.all(np.diff(sol.a, axis=1) >= 0)
    dt = put_paths.grid.dt
    inc = 64.0 * np.maximum(-sol.phi[:, :-1], 0) * dt
    np.testing.assert_allclose(np.diff(sol.a, axis=1), inc, rtol=1e-12, atol=1e-15)
    st = increasing_part_stats(sol)
    assert st["mean_total"] == pytest.approx(sol.a[:, -1].mean())
    assert st["max_total"] >= st["mean_total"] > 0
    assert 0 < st["fraction_active"] < 1


def test_unconstrained_has_no_increasing_part(linear):
    ens = simulate_paths(linear, 0.0, 100.0, TimeGrid(0, 1, 10), 4000, seed=3)
    st = increasing_part_stats(solve_penalized_lsmc(ens, linear, 1e3))
    assert st == {"mean_total": 0.0, "max_total": 0.0, "fraction_active": 0.0}


def test_literal_mode_can_decrease(put, put_paths):
    sol = solve_penalized_lsmc(put_paths, put, 64.0, a_mode="literal")
    assert np.any(np.diff(sol.a, axis=1) < 0)


def test_lsmc_unconstrained_near_closed_form(linear):
    ens = simulate_paths(linear, 0.0, 100.0, TimeGrid(0, 1, 50), 40_000, seed=9)
    sol = solve_penalized_lsmc(ens, linear, 0.0)
    ref = closed_form_linear({"rate": 0.05, "vol": 0.2, "strike": 100, "x0": 100, "T": 1})
    assert abs(sol.y0 - ref) < 4 * sol.y0_stderr + 0.02


def test_lsmc_penalty_is_monotone_in_alpha(put, put_paths):
    y = [solve_penalized_lsmc(put_paths, put, a).y0 for a in (0.0, 16.0, 256.0)]
    assert y[0] < y[1] < y[2]


def test_lsmc_is_deterministic(put, put_paths):
    a = solve_penalized_lsmc(put_paths, put, 32.0)
    b = solve_penalized_lsmc(put_paths, put, 32.0)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.a, b.a)


def test_bundled_bases_agree(put, put_paths):
    y_poly = solve_penalized_lsmc(put_paths, put, 16.0).y0
    y_pl = solve_penalized_lsmc(put_paths, put, 16.0,
                                RegressionBasis(family="piecewise-linear", n_knots=6)).y0
    assert y_poly == pytest.approx(y_pl, rel=0.01)


def test_single_global_fit_overshoots(put, put_paths):
    # one degree-4 fit cannot follow the kink; the penalty ratchets its dips
    y_one = solve_penalized_lsmc(put_paths, put, 16.0, RegressionBasis(n_bundles=1)).y0
    assert y_one > solve_penalized_lsmc(put_paths, put, 16.0).y0 + 0.1


def test_degenerate_regressors_use_ridge():
    # two distinct states only: a degree-4 basis is rank deficient
    spec = make_spec(terminal=lambda x: np.asarray(x)[..., 0] ** 2)
    ens = simulate_paths(spec, 0.0, 1.0, TimeGrid(0, 1, 3), 100, seed=0)
    ens.states[50:] = 2.0
    sol = solve_penalized_lsmc(ens, spec, 0.0, RegressionBasis(degree=4, n_bundles=1))
    assert np.all(np.isfinite(sol.y))
    assert sol.y0 == pytest.approx(2.5, rel=1e-6)


def test_basis_validation():
    with pytest.raises(ValueError):
        RegressionBasis(family="fourier")
    with pytest.raises(ValueError):
        RegressionBasis(n_bundles=0)


def test_solve_implicit_linear_root():
    c = np.array([1.0, -3.0, 0.0])
    y = solve_implicit(lambda v, idx: -5.0 * v, c, 0.1, 0.0, True)
    np.testing.assert_allclose(y, c / 1.5, rtol=1e-12)
    y = solve_implicit(lambda v, idx: 2.0 * v, c, 0.1, 2.0, False)
    np.testing.assert_allclose(y, c / 0.8, rtol=1e-10)
    with pytest.raises(StepSizeError, match="refine"):
        solve_implicit(lambda v, idx: 20.0 * v, c, 0.1, 20.0, False)


def test_step_size_guard():
    spec = make_spec(vol=0.2, driver=lambda t, x, y, z: 30 * np.sin(np.asarray(y)), lip_g=30.0)
    ens = simulate_paths(spec, 0.0, 0.0, TimeGrid(0, 1, 10), 100, seed=0)
    with pytest.raises(StepSizeError, match="refine"):
        solve_penalized_lsmc(ens, spec, 0.0)
