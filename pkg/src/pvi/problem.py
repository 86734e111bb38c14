"""Constrained-BSDE problem data, assumption probes and the benchmark catalog.

Every coefficient is a numpy-vectorized callable.  With ``d = dim`` and an
arbitrary leading batch shape ``...``:

* ``drift(t, x)``            x: (..., d)           -> (..., d)
* ``diffusion(t, x)``        x: (..., d)           -> (..., d, d)
* ``driver(t, x, y, z)``     y: (...), z: (..., d) -> (...)
* ``constraint(t, x, y, z)``                       -> (...)
* ``terminal(x)``                                  -> (...)

``t`` is always a scalar.  Feasibility of the constraint means
``constraint >= 0``; the penalty uses its negative part ``max(-constraint, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from .errors import CatalogError, EvaluationError

Array = np.ndarray

SLOPE_SLACK = 1e-9


@dataclass(frozen=True)
class CoefficientSet:
    dim: int
    horizon: float
    drift: Callable[[float, Array], Array]
    diffusion: Callable[[float, Array], Array]
    driver: Callable[[float, Array, Array, Array], Array]
    constraint: Callable[[float, Array, Array, Array], Array]
    terminal: Callable[[Array], Array]
    lip_bx: float
    lip_g: float
    lip_phi: float
    growth_p: int
    # Set when the constraint has the reflected form y - h(t, x).
    obstacle: Callable[[float, Array], Array] | None = None
    # Constraint nondecreasing in y; lets solvers treat the penalty implicitly
    # without a step-size restriction.
    phi_monotone_y: bool = False
    name: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        for attr in ("lip_bx", "lip_g", "lip_phi"):
            if getattr(self, attr) < 0:
                raise ValueError(f"{attr} must be nonnegative")
        if self.growth_p < 0:
            raise ValueError("growth_p must be nonnegative")

    def penalty(self, t: float, x: Array, y: Array, z: Array) -> Array:
        """Negative part of the constraint."""
        return np.maximum(-np.asarray(self.constraint(t, x, y, z), dtype=float), 0.0)


@dataclass(frozen=True)
class ValidationReport:
    lipschitz_estimates: dict[str, float]
    growth_estimates: dict[str, float]
    violations: list[tuple[str, tuple[Any, Any], float]]


def _finite(name: str, value, **inputs) -> Array:
    value = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(value)):
        shown = {k: np.asarray(v).tolist() for k, v in inputs.items()}
        raise EvaluationError(f"{name} returned a non-finite value at {shown}")
    return value


def validate_problem(spec: CoefficientSet, n_samples: int, box_radius: float,
                     seed: int) -> ValidationReport:
    """Estimate Lipschitz and growth constants by random pair sampling.

    Pairs are drawn uniformly from ``[-box_radius, box_radius]`` in every state,
    value and gradient argument (time uniformly on ``[0, T]``).  A violation is
    a sampled slope above the declared constant times ``1 + 1e-9``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not box_radius > 0:
        raise ValueError("box_radius must be > 0")
    rng = np.random.default_rng(seed)
    d, R, n = spec.dim, float(box_radius), int(n_samples)

    def box(*shape):
        return rng.uniform(-R, R, size=shape)

    lip: dict[str, float] = {}
    growth: dict[str, float] = {}
    violations: list[tuple[str, tuple[Any, Any], float]] = []

    def record(name, slopes, declared, points_a, points_b):
        slopes = np.where(np.isfinite(slopes), slopes, 0.0)
        lip[name] = float(slopes.max(initial=0.0))
        for i in np.flatnonzero(slopes > declared * (1.0 + SLOPE_SLACK)):
            violations.append((name, (points_a[i], points_b[i]), float(slopes[i])))

    # b and sigma, jointly in x.
    t = rng.uniform(0.0, spec.horizon, size=n)
    x1, x2 = box(n, d), box(n, d)
    b1 = np.stack([_finite("drift", spec.drift(ti, xi[None]), t=ti, x=xi[None])[0] for ti, xi in zip(t, x1)])
    b2 = np.stack([_finite("drift", spec.drift(ti, xi[None]), t=ti, x=xi[None])[0] for ti, xi in zip(t, x2)])
    s1 = np.stack([_finite("diffusion", spec.diffusion(ti, xi[None]), t=ti, x=xi[None])[0] for ti, xi in zip(t, x1)])
    s2 = np.stack([_finite("diffusion", spec.diffusion(ti, xi[None]), t=ti, x=xi[None])[0] for ti, xi in zip(t, x2)])
    dx = np.linalg.norm(x1 - x2, axis=-1)
    num = np.linalg.norm(b1 - b2, axis=-1) + np.linalg.norm((s1 - s2).reshape(n, -1), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        slopes = num / dx
    pts_a = [(float(ti), xi.tolist()) for ti, xi in zip(t, x1)]
    pts_b = [(float(ti), xi.tolist()) for ti, xi in zip(t, x2)]
    record("drift_diffusion", slopes, spec.lip_bx, pts_a, pts_b)

    # g and Phi in (y, z) at common (t, x).
    for name, fn, declared in (("driver", spec.driver, spec.lip_g),
                               ("constraint", spec.constraint, spec.lip_phi)):
        t = rng.uniform(0.0, spec.horizon, size=n)
        x = box(n, d)
        y1, y2 = box(n), box(n)
        z1, z2 = box(n, d), box(n, d)
        v1 = np.array([_finite(name, fn(ti, xi[None], np.array([yi]), zi[None]),
                               t=ti, x=xi[None], y=[yi], z=zi[None])[0]
                       for ti, xi, yi, zi in zip(t, x, y1, z1)])
        v2 = np.array([_finite(name, fn(ti, xi[None], np.array([yi]), zi[None]),
                               t=ti, x=xi[None], y=[yi], z=zi[None])[0]
                       for ti, xi, yi, zi in zip(t, x, y2, z2)])
        dist = np.abs(y1 - y2) + np.linalg.norm(z1 - z2, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            slopes = np.abs(v1 - v2) / dist
        pts_a = [(float(ti), xi.tolist(), float(yi), zi.tolist()) for ti, xi, yi, zi in zip(t, x, y1, z1)]
        pts_b = [(float(ti), xi.tolist(), float(yi), zi.tolist()) for ti, xi, yi, zi in zip(t, x, y2, z2)]
        record(name, slopes, declared, pts_a, pts_b)

        # |f(t, x, 0, 0)| / (1 + |x|^p)
        v0 = np.array([_finite(name, fn(ti, xi[None], np.zeros(1), np.zeros((1, d))),
                               t=ti, x=xi[None])[0] for ti, xi in zip(t, x)])
        scale = 1.0 + np.linalg.norm(x, axis=-1) ** spec.growth_p
        growth[name] = float(np.max(np.abs(v0) / scale))

    return ValidationReport(lip, growth, violations)


# --------------------------------------------------------------------------
# Catalog
#
# Why each entry admits a finite constrained supersolution: the payoff max(K - x, 0) and the
# obstacle are bounded by K, and g = -r y <= 0 for y >= 0, so the constant
# process y' = K with A'_t = r K t is a constrained g-supersolution.  For the
# z-constraint the same constant has z' = 0 and Phi = K > 0.
# --------------------------------------------------------------------------

_REQUIRED = {
    "unconstrained_linear": ("rate", "strike", "vol"),
    "obstacle_put": ("strike", "vol", "rate"),
    "z_constraint": ("slope",),
}
_OPTIONAL = {
    "unconstrained_linear": {"drift": None, "horizon": 1.0},
    "obstacle_put": {"drift": None, "horizon": 1.0},
    "z_constraint": {"rate": 0.05, "vol": 0.2, "strike": 100.0, "drift": None, "horizon": 1.0},
}

CATALOG = tuple(_REQUIRED)


def _lognormal(drift: float, vol: float):
    def b(t, x):
        return drift * np.asarray(x, dtype=float)

    def sigma(t, x):
        return vol * np.asarray(x, dtype=float)[..., None]

    return b, sigma


def builtin_problem(name: str, params: Mapping[str, float]) -> CoefficientSet:
    """Build one of the catalog problems (1D lognormal state, put payoff)."""
    if name not in _REQUIRED:
        raise CatalogError(f"unknown catalog problem {name!r}; choose from {sorted(_REQUIRED)}")
    params = dict(params)
    missing = [k for k in _REQUIRED[name] if k not in params]
    if missing:
        raise CatalogError(f"problem {name!r} is missing parameter(s) {missing}")
    unknown = sorted(set(params) - set(_REQUIRED[name]) - set(_OPTIONAL[name]))
    if unknown:
        raise CatalogError(f"problem {name!r} got unknown parameter(s) {unknown}")
    p = {**_OPTIONAL[name], **params}
    if p["drift"] is None:
        p["drift"] = p["rate"]
    p = {k: float(v) for k, v in p.items()}

    r, K, vol, mu = p["rate"], p["strike"], p["vol"], p["drift"]
    b, sigma = _lognormal(mu, vol)

    def driver(t, x, y, z):
        return -r * np.asarray(y, dtype=float)

    def payoff(x):
        return np.maximum(K - np.asarray(x, dtype=float)[..., 0], 0.0)

    common = dict(dim=1, horizon=p["horizon"], drift=b, diffusion=sigma, driver=driver,
                  terminal=payoff, lip_bx=abs(mu) + abs(vol), lip_g=abs(r), growth_p=1,
                  name=name, params=p)

    if name == "unconstrained_linear":
        def phi(t, x, y, z):
            return np.ones(np.shape(y))

        return CoefficientSet(constraint=phi, lip_phi=0.0, phi_monotone_y=True, **common)

    if name == "obstacle_put":
        def h(t, x):
            return np.maximum(K - np.asarray(x, dtype=float)[..., 0], 0.0)

        def phi(t, x, y, z):
            return np.asarray(y, dtype=float) - h(t, x)

        return CoefficientSet(constraint=phi, lip_phi=1.0, obstacle=h, phi_monotone_y=True, **common)

    c = p["slope"]

    def phi(t, x, y, z):
        return np.asarray(y, dtype=float) - c * np.linalg.norm(np.asarray(z, dtype=float), axis=-1)

    return CoefficientSet(constraint=phi, lip_phi=max(1.0, c), phi_monotone_y=True, **common)
