import numpy as np
import pytest

from pvi.problem import CoefficientSet, builtin_problem

BENCH = {"rate": 0.05, "vol": 0.2, "strike": 100.0}

_ACCEPTANCE: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


def make_spec(*, drift=0.0, vol=0.0, driver=None, constraint=None, terminal=None, horizon=1.0,
              lip_g=0.0, lip_phi=0.0, obstacle=None, monotone=True, name="toy"):
    """1D spec with constant-coefficient defaults; callables override."""
    def b(t, x):
        x = np.asarray(x, dtype=float)
        return drift(t, x) if callable(drift) else np.full(x.shape, float(drift))

    def s(t, x):
        x = np.asarray(x, dtype=float)
        v = vol(t, x) if callable(vol) else np.full(x.shape, float(vol))
        return v[..., None]

    return CoefficientSet(
        dim=1, horizon=horizon, drift=b, diffusion=s,
        driver=driver or (lambda t, x, y, z: np.zeros(np.shape(y))),
        constraint=constraint or (lambda t, x, y, z: np.ones(np.shape(y))),
        terminal=terminal or (lambda x: np.zeros(np.shape(x)[:-1])),
        lip_bx=1.0, lip_g=lip_g, lip_phi=lip_phi, growth_p=1, obstacle=obstacle,
        phi_monotone_y=monotone, name=name)


@pytest.fixture(scope="session")
def put():
    return builtin_problem("obstacle_put", BENCH)


@pytest.fixture(scope="session")
def linear():
    return builtin_problem("unconstrained_linear", BENCH)
