import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvi.errors import CatalogError, EvaluationError
from pvi.problem import CATALOG, builtin_problem, validate_problem

from conftest import BENCH, make_spec

PARAMS = {"unconstrained_linear": BENCH, "obstacle_put": BENCH, "z_constraint": {"slope": 0.5}}


def test_linear_driver_has_no_violations():
    spec = make_spec(driver=lambda t, x, y, z: -0.05 * np.asarray(y), lip_g=0.05)
    rep = validate_problem(spec, 500, 10.0, seed=1)
    assert not [v for v in rep.violations if v[0] == "driver"]
    assert 0.04 < rep.lipschitz_estimates["driver"] <= 0.05 * (1 + 1e-12)


def test_obstacle_constraint_slope_is_one(put):
    rep = validate_problem(put, 500, 50.0, seed=2)
    assert not rep.violations
    assert rep.lipschitz_estimates["constraint"] <= 1.0 + 1e-9


def test_quadratic_driver_is_flagged():
    spec = make_spec(driver=lambda t, x, y, z: np.asarray(y) ** 2, lip_g=1.0)
    rep = validate_problem(spec, 200, 10.0, seed=3)
    bad = [v for v in rep.violations if v[0] == "driver"]
    assert len(bad) > 100
    # distance is |dy| + |dz|, so each slope is bounded by |y1 + y2|
    for name, (pa, pb), slope in bad:
        assert 1.0 < slope <= abs(pa[2] + pb[2]) * (1 + 1e-12)


@pytest.mark.parametrize("name", CATALOG)
def test_catalog_satisfies_its_declared_constants(name):
    rep = validate_problem(builtin_problem(name, PARAMS[name]), 300, 200.0, seed=4)
    assert rep.violations == []


def test_validation_is_deterministic_in_seed(put):
    a = validate_problem(put, 50, 5.0, seed=9)
    b = validate_problem(put, 50, 5.0, seed=9)
    assert a == b


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_coefficient_names_itself():
    spec = make_spec(driver=lambda t, x, y, z: np.log(np.asarray(y) - 1e9))
    with pytest.raises(EvaluationError, match="driver"):
        validate_problem(spec, 5, 1.0, seed=0)


def test_catalog_values():
    lin = builtin_problem("unconstrained_linear", {"rate": 0.05, "strike": 100, "vol": 0.2})
    x = np.array([[1.0], [90.0], [500.0]])
    assert np.all(lin.constraint(0.3, x, np.array([-4.0, 0.0, 9.0]), np.zeros((3, 1))) == 1.0)

    put = builtin_problem("obstacle_put", {"strike": 100, "vol": 0.2, "rate": 0.05})
    assert put.constraint(0.0, np.array([[90.0]]), np.array([5.0]), np.array([[0.0]]))[0] == -5.0
    assert put.obstacle(0.0, np.array([[90.0]]))[0] == 10.0

    zc = builtin_problem("z_constraint", {"slope": 0.5})
    assert zc.constraint(0.0, np.array([[70.0]]), np.array([2.0]), np.array([[2.0]]))[0] == 1.0
    assert zc.obstacle is None


def test_catalog_errors():
    with pytest.raises(CatalogError, match="unknown"):
        builtin_problem("call", BENCH)
    with pytest.raises(CatalogError, match="missing"):
        builtin_problem("obstacle_put", {"strike": 100, "vol": 0.2})
    with pytest.raises(CatalogError, match="unknown parameter"):
        builtin_problem("obstacle_put", {**BENCH, "volatility": 0.3})


def test_penalty_is_negative_part(put):
    x = np.array([[90.0], [90.0], [120.0]])
    y = np.array([5.0, 12.0, 0.0])
    np.testing.assert_array_equal(put.penalty(0.0, x, y, np.zeros((3, 1))), [5.0, 0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 400.0), st.floats(-50.0, 50.0), st.floats(-50.0, 50.0))
def test_builtin_problem_is_pure(x, y, z):
    a = builtin_problem("z_constraint", {"slope": 0.7})
    b = builtin_problem("z_constraint", {"slope": 0.7})
    args = (0.5, np.array([[x]]), np.array([y]), np.array([[z]]))
    assert a.constraint(*args) == b.constraint(*args)
    assert a.driver(*args) == b.driver(*args)
    np.testing.assert_array_equal(a.diffusion(0.5, args[1]), b.diffusion(0.5, args[1]))


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 400.0), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_unconstrained_constraint_never_binds(x, y, z):
    lin = builtin_problem("unconstrained_linear", BENCH)
    assert lin.constraint(0.0, np.array([[x]]), np.array([y]), np.array([[z]]))[0] > 0
