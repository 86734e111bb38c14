"""Finite differences in 1D for the penalized PDE

    d_t u + 1/2 sigma^2 u_xx + b u_x + (g + alpha Phi^-)(t, x, u, sigma u_x) = 0,

a projected (reflected) scheme for obstacle constraints, and closed-form
oracles for the unconstrained lognormal benchmark.

Unknowns are the interior nodes; boundary values are either eliminated by
linear extrapolation or pinned to the terminal data.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Mapping

import numpy as np
from scipy import integrate, stats
from scipy.linalg import solve_banded

from .errors import BoundaryError, DivergenceError, ShapeError, StabilityError
from .problem import CoefficientSet
from .sde import TimeGrid
from .surface import ValueSurface

NEWTON_TOL = 1e-12
NEWTON_MAX = 100
FD_STEP = 1e-6
BOUNDARIES = ("linear-extrapolation", "dirichlet-terminal-extension")
TREATMENTS = ("semi-implicit", "explicit-lagged")


@dataclass(frozen=True)
class FdScheme:
    theta: float = 1.0
    penalty_treatment: str = "semi-implicit"
    x_min: float = 20.0
    x_max: float = 500.0
    n_space: int = 400           # number of intervals
    boundary: str = "linear-extrapolation"

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.penalty_treatment not in TREATMENTS:
            raise ValueError(f"unknown penalty treatment {self.penalty_treatment!r}")
        if self.boundary not in BOUNDARIES:
            raise BoundaryError(f"unknown boundary condition {self.boundary!r}; use one of {BOUNDARIES}")
        if not self.x_min < self.x_max:
            raise BoundaryError(f"need x_min < x_max, got [{self.x_min}, {self.x_max}]")
        if self.n_space < 4:
            raise ValueError("n_space must be >= 4")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_space + 1)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_space


# --------------------------------------------------------------------------
# Spatial operator
# --------------------------------------------------------------------------

@dataclass
class _Operator:
    """L on interior nodes: (L v)_i = lo_i v_{i-1} + di_i v_i + up_i v_{i+1},
    plus ``edge`` * (u_0, u_N) for pinned boundaries."""
    lo: np.ndarray
    di: np.ndarray
    up: np.ndarray
    edge: tuple[float, float]

    def apply(self, v: np.ndarray, ends: tuple[float, float]) -> np.ndarray:
        out = self.di * v
        out[1:] += self.lo[1:] * v[:-1]
        out[:-1] += self.up[:-1] * v[1:]
        out[0] += self.edge[0] * ends[0]
        out[-1] += self.edge[1] * ends[1]
        return out

    def banded(self, scale: float, shift: np.ndarray | float = 0.0) -> np.ndarray:
        """Band storage of I - scale * L + diag(shift)."""
        m = self.di.size
        ab = np.zeros((3, m))
        ab[0, 1:] = -scale * self.up[:-1]
        ab[1] = 1.0 - scale * self.di + shift
        ab[2, :-1] = -scale * self.lo[1:]
        return ab


def _coefficients(spec: CoefficientSet, x: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    b = np.asarray(spec.drift(t, x[:, None]), dtype=float)[:, 0]
    s = np.asarray(spec.diffusion(t, x[:, None]), dtype=float)[:, 0, 0]
    return b, s


def _operator(spec: CoefficientSet, scheme: FdScheme, x: np.ndarray, t: float) -> _Operator:
    b, s = _coefficients(spec, x[1:-1], t)
    dx = x[1] - x[0]
    diff = 0.5 * s**2 / dx**2
    lo, di, up = diff.copy(), -2.0 * diff, diff.copy()
    upwind = np.abs(b) * dx > s**2
    cen = ~upwind
    lo[cen] -= b[cen] / (2 * dx)
    up[cen] += b[cen] / (2 * dx)
    fwd = upwind & (b > 0)
    bwd = upwind & (b < 0)
    up[fwd] += b[fwd] / dx
    di[fwd] -= b[fwd] / dx
    di[bwd] += b[bwd] / dx
    lo[bwd] -= b[bwd] / dx
    edge = (0.0, 0.0)
    if scheme.boundary == "linear-extrapolation":
        # u_0 = 2 u_1 - u_2 and u_N = 2 u_{N-1} - u_{N-2}
        di[0] += 2 * lo[0]
        up[0] -= lo[0]
        di[-1] += 2 * up[-1]
        lo[-1] -= up[-1]
        lo[0] = 0.0
        up[-1] = 0.0
    else:
        edge = (float(lo[0]), float(up[-1]))
        lo[0] = 0.0
        up[-1] = 0.0
    return _Operator(lo, di, up, edge)


class _Stepper:
    """Shared backward time stepping for the penalized and projected solvers."""

    def __init__(self, spec: CoefficientSet, scheme: FdScheme, grid: TimeGrid):
        if spec.dim != 1:
            raise ShapeError("finite differences are 1D only")
        if not math.isclose(grid.t_end, spec.horizon, abs_tol=1e-12):
            raise ValueError(f"grid ends at {grid.t_end}, problem horizon is {spec.horizon}")
        self.spec, self.scheme, self.grid = spec, scheme, grid
        self.x = scheme.x
        self.xc = self.x[:, None]
        self.dx = scheme.dx
        self.dt = grid.dt
        payoff = np.asarray(spec.terminal(self.xc), dtype=float)
        if not np.all(np.isfinite(payoff)):
            raise BoundaryError("terminal condition is not finite on the space grid")
        self.payoff = payoff
        self.ends = (float(payoff[0]), float(payoff[-1]))
        self._ops: dict[int, _Operator] = {}
        self._check_stability()

    def _check_stability(self):
        th = self.scheme.theta
        if th < 1.0:
            smax = max(float(np.max(_coefficients(self.spec, self.x, self.grid.t(k))[1] ** 2))
                       for k in (0, self.grid.n_steps))
            ratio = (1 - th) * self.dt * smax / self.dx**2
            if ratio > 1.0:
                raise StabilityError(
                    f"explicit part unstable: (1-theta)*dt*max(sigma^2)/dx^2 = {ratio:.3g} > 1; "
                    "use more time steps or theta = 1")

    def op(self, k: int) -> _Operator:
        if k not in self._ops:
            self._ops[k] = _operator(self.spec, self.scheme, self.x, self.grid.t(k))
        return self._ops[k]

    def fill(self, v: np.ndarray) -> np.ndarray:
        full = np.empty(v.size + 2)
        full[1:-1] = v
        if self.scheme.boundary == "linear-extrapolation":
            full[0] = 2 * v[0] - v[1]
            full[-1] = 2 * v[-1] - v[-2]
        else:
            full[0], full[-1] = self.ends
        return full

    def z(self, k: int, full: np.ndarray) -> np.ndarray:
        s = _coefficients(self.spec, self.x, self.grid.t(k))[1]
        return (s * np.gradient(full, self.dx))[:, None]

    def rhs(self, k: int, u_next: np.ndarray) -> np.ndarray:
        """Known part of the theta step from t_{k+1} back to t_k (interior)."""
        th, dt = self.scheme.theta, self.dt
        v = u_next[1:-1]
        out = v.copy()
        if th < 1.0:
            out += dt * (1 - th) * self.op(k + 1).apply(v, self.ends)
        if th > 0.0 and self.scheme.boundary != "linear-extrapolation":
            e = self.op(k).edge
            out[0] += dt * th * e[0] * self.ends[0]
            out[-1] += dt * th * e[1] * self.ends[1]
        return out

    def generator(self, k: int, alpha: float):
        spec, tk, xi = self.spec, self.grid.t(k), self.xc[1:-1]

        def G(v, z):
            out = np.asarray(spec.driver(tk, xi, v, z), dtype=float)
            if alpha:
                out = out + alpha * spec.penalty(tk, xi, v, z)
            return out

        return G

    def newton(self, k: int, G, rhs: np.ndarray, start: np.ndarray,
               obstacle: np.ndarray | None = None):
        """Semismooth Newton for  A v - dt G(v, z(v)) = rhs  (or the
        complementarity form min(., v - h) = 0 when ``obstacle`` is given),
        with z recomputed from every iterate."""
        dt, th = self.dt, self.scheme.theta
        op = self.op(k)
        v = start.copy()
        active = np.zeros(v.size, dtype=bool)
        sig = _coefficients(self.spec, self.x[1:-1], self.grid.t(k))[1]
        for it in range(NEWTON_MAX):
            zi = self.z(k, self.fill(v))[1:-1]
            g0 = G(v, zi)
            step = FD_STEP * (1.0 + np.abs(v))
            gy = (G(v + step, zi) - g0) / step
            zstep = FD_STEP * (1.0 + np.abs(zi))
            gz = (G(v, zi + zstep) - g0) / zstep[:, 0]
            res = v - dt * th * op.apply(v, (0.0, 0.0)) - dt * g0 - rhs
            ab = op.banded(dt * th, -dt * gy)
            if np.any(gz):
                # z_i = sigma_i (v_{i+1} - v_{i-1}) / (2 dx)
                w = dt * gz * sig / (2 * self.dx)
                ab[0, 1:] -= w[:-1]
                ab[2, :-1] += w[1:]
                if self.scheme.boundary == "linear-extrapolation":
                    # edge rows see the ghost: z = sigma (v_1 - v_0) / dx etc.
                    ab[1, 0] += 2 * w[0]
                    ab[0, 1] -= w[0]
                    ab[1, -1] -= 2 * w[-1]
                    ab[2, -2] += w[-1]
            if obstacle is not None:
                gap = v - obstacle
                active = gap < res
                res = np.where(active, gap, res)
                ab[1, active] = 1.0
                ab[0, 1:][active[:-1]] = 0.0
                ab[2, :-1][active[1:]] = 0.0
            if np.max(np.abs(res)) <= NEWTON_TOL * (1.0 + np.max(np.abs(v))) and it:
                return v, active
            dv = solve_banded((1, 1), ab, -res)
            if np.any(gz) and obstacle is None:
                # z couples neighbours through |z|; the Jacobian can lose its
                # M-matrix sign pattern, so backtrack on the residual.
                r0 = np.max(np.abs(res))
                lam = 1.0
                while lam > 1e-6:
                    trial = self.equation_residual(k, G, rhs, v + lam * dv)
                    if np.max(np.abs(trial)) <= (1 - 1e-4 * lam) * r0:
                        break
                    lam *= 0.5
                dv = lam * dv
            v = v + dv
            if obstacle is not None:
                v[active] = obstacle[active]
            if np.all(np.abs(dv) <= NEWTON_TOL * (1.0 + np.abs(v))):
                return v, active
        j = int(np.argmax(np.abs(res)))
        raise DivergenceError(
            f"nonlinear solve at step {k} did not reach {NEWTON_TOL:g} in {NEWTON_MAX} iterations "
            f"(residual {abs(res[j]):.3g} at x={self.x[j + 1]:.6g}); a z-dependent penalty needs "
            "dt*alpha*lip_phi*sigma/dx small -- use more time steps or a smaller alpha")

    def equation_residual(self, k: int, G, rhs: np.ndarray, v: np.ndarray) -> np.ndarray:
        zi = self.z(k, self.fill(v))[1:-1]
        op = self.op(k)
        return v - self.dt * self.scheme.theta * op.apply(v, (0.0, 0.0)) - self.dt * G(v, zi) - rhs

    def linear_solve(self, k: int, rhs: np.ndarray) -> np.ndarray:
        ab = self.op(k).banded(self.dt * self.scheme.theta)
        return solve_banded((1, 1), ab, rhs)


def _meta(scheme: FdScheme, spec: CoefficientSet, **extra) -> dict[str, Any]:
    return {"problem": spec.name, "scheme": asdict(scheme), **extra}


def solve_penalized_fd(spec: CoefficientSet, scheme: FdScheme, grid: TimeGrid,
                       alpha: float) -> ValueSurface:
    """Backward theta-scheme for the penalized PDE.

    The nonlinear terms g + alpha Phi^- are implicit ("semi-implicit": solved
    by Newton's method to 1e-12, z = sigma D_x u updated every iterate) or
    taken from the previous time level ("explicit-lagged").
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    st = _Stepper(spec, scheme, grid)
    dt, n = st.dt, grid.n_steps
    lagged = scheme.penalty_treatment == "explicit-lagged"
    if lagged:
        lim = dt * (spec.lip_g + alpha * spec.lip_phi)
        if lim > 1.0:
            raise StabilityError(f"explicit-lagged nonlinear terms need dt*(lip_g + alpha*lip_phi) <= 1, "
                                 f"got {lim:.3g}; use semi-implicit treatment or more time steps")
    elif alpha and not spec.phi_monotone_y:
        raise StabilityError("semi-implicit penalty needs a constraint nondecreasing in y")

    u = np.empty((n + 1, st.x.size))
    inc = np.zeros((n, st.x.size))
    u[n] = st.payoff
    for k in range(n - 1, -1, -1):
        tk = grid.t(k)
        G = st.generator(k, alpha)
        rhs = st.rhs(k, u[k + 1])
        if lagged:
            z_next = st.z(k + 1, u[k + 1])
            src = G(u[k + 1][1:-1], z_next[1:-1])
            v = st.linear_solve(k, rhs + dt * src)
            full = st.fill(v)
            pen_at = (u[k + 1], z_next)
        else:
            v, _ = st.newton(k, G, rhs, u[k + 1][1:-1])
            full = st.fill(v)
            pen_at = (full, st.z(k, full))
        if not np.all(np.isfinite(full)):
            raise DivergenceError(f"non-finite values at step {k}")
        u[k] = full
        if alpha:
            inc[k] = alpha * spec.penalty(tk, st.xc, pen_at[0], pen_at[1]) * dt
    return ValueSurface(grid.times, st.x.copy(), u, float(alpha), scheme.boundary, "fd",
                        increments=inc, meta=_meta(scheme, spec))


def solve_projected_obstacle_fd(spec: CoefficientSet, scheme: FdScheme, grid: TimeGrid,
                                projection: str = "complementarity") -> ValueSurface:
    """Reflected scheme for constraints of the form y - h(t, x).

    Each step first takes the alpha = 0 step.  Where that already lies above
    h it is kept unchanged.  Otherwise ``"complementarity"`` (default)
    solves the discrete obstacle problem min(step equation, u - h) = 0 by
    active-set Newton, and ``"split"`` simply sets u <- max(u, h).  Both end
    with u <- max(u, h) at every node, so u >= h exactly.

    ``increments`` records the reflection push (the step-equation residual on
    the active set), i.e. the discrete increase of the reflecting process.
    """
    if spec.obstacle is None:
        raise ShapeError("projected solver needs an obstacle-form constraint y - h(t, x); "
                         f"problem {spec.name!r} declares none")
    if projection not in ("complementarity", "split"):
        raise ValueError(f"unknown projection {projection!r}")
    st = _Stepper(spec, scheme, grid)
    n = grid.n_steps
    h_of = spec.obstacle
    u = np.empty((n + 1, st.x.size))
    inc = np.zeros((n, st.x.size))
    u[n] = st.payoff
    for k in range(n - 1, -1, -1):
        G = st.generator(k, 0.0)
        rhs = st.rhs(k, u[k + 1])
        v, _ = st.newton(k, G, rhs, u[k + 1][1:-1])
        h = np.asarray(h_of(grid.t(k), st.xc), dtype=float)
        hi = h[1:-1]
        if np.any(v < hi):
            if projection == "split":
                push = np.maximum(hi - v, 0.0)
                v = np.maximum(v, hi)
            else:
                v, active = st.newton(k, G, rhs, v, obstacle=hi)
                push = np.where(active, st.equation_residual(k, G, rhs, v), 0.0)
            inc[k, 1:-1] = np.maximum(push, 0.0)
        u[k] = np.maximum(st.fill(v), h)
    return ValueSurface(grid.times, st.x.copy(), u, math.inf, scheme.boundary, "projected",
                        increments=inc, meta=_meta(scheme, spec, projection=projection))


def expected_total(spec: CoefficientSet, scheme: FdScheme, grid: TimeGrid,
                   increments: np.ndarray) -> np.ndarray:
    """E[sum_k increments_k(X_{t_k}) | X_{t_0} = x_j] by a backward implicit
    pass of the undiscounted generator; boundary nodes are extrapolated."""
    st = _Stepper(spec, FdScheme(1.0, "semi-implicit", scheme.x_min, scheme.x_max, scheme.n_space,
                                 "linear-extrapolation"), grid)
    m = np.zeros(st.x.size)
    for k in range(grid.n_steps - 1, -1, -1):
        v = st.linear_solve(k, m[1:-1] + increments[k, 1:-1])
        m = st.fill(v)
    return m


# --------------------------------------------------------------------------
# Closed form
# --------------------------------------------------------------------------

def _lognormal_params(params: Mapping[str, float]):
    r = float(params["rate"])
    vol = float(params["vol"])
    T = float(params["T"])
    x0 = float(params["x0"])
    mu = float(params.get("drift", r))
    if not vol > 0:
        raise ValueError(f"closed form needs vol > 0, got {vol}")
    if not T > 0:
        raise ValueError(f"closed form needs T > 0, got {T}")
    if not x0 > 0:
        raise ValueError(f"closed form needs x0 > 0, got {x0}")
    return r, vol, T, x0, mu


def _quadrature(params: Mapping[str, float]) -> float:
    r, vol, T, x0, mu = _lognormal_params(params)
    if params.get("payoff", "put") == "unit":
        val, _ = integrate.quad(stats.norm.pdf, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)
        return math.exp(-r * T) * val
    K = float(params["strike"])
    sq = vol * math.sqrt(T)
    drift = (mu - 0.5 * vol**2) * T

    def f(w):
        return (K - x0 * math.exp(drift + sq * w)) * stats.norm.pdf(w)

    kink = (math.log(K / x0) - drift) / sq
    val, _ = integrate.quad(f, -np.inf, kink, epsabs=1e-13, epsrel=1e-13, limit=200)
    return math.exp(-r * T) * val


def closed_form_linear(params: Mapping[str, Any], check: bool = True) -> float:
    """exp(-rT) E[Psi(X_T)] for dX = mu X dt + vol X dW, X_0 = x0.

    Put payoff (default):  exp(-rT) [K N(-d2) - x0 exp(mu T) N(-d1)] with
    d1 = (ln(x0/K) + (mu + vol^2/2) T) / (vol sqrt T), d2 = d1 - vol sqrt T.
    ``payoff="unit"`` gives exp(-rT).  Keys: rate, vol, strike, x0, T, and
    optionally drift (defaults to rate).  With ``check`` the value is compared
    against direct quadrature of the lognormal density.
    """
    r, vol, T, x0, mu = _lognormal_params(params)
    kind = params.get("payoff", "put")
    if kind == "unit":
        value = math.exp(-r * T)
    elif kind == "put":
        K = float(params["strike"])
        sq = vol * math.sqrt(T)
        d1 = (math.log(x0 / K) + (mu + 0.5 * vol**2) * T) / sq
        d2 = d1 - sq
        value = math.exp(-r * T) * (K * stats.norm.cdf(-d2) - x0 * math.exp(mu * T) * stats.norm.cdf(-d1))
    else:
        raise ValueError(f"unknown payoff {kind!r}")
    if check:
        q = _quadrature(params)
        if abs(q - value) > 1e-8 * max(1.0, abs(value)):
            raise ArithmeticError(f"closed form {value!r} disagrees with quadrature {q!r}")
    return float(value)


# --------------------------------------------------------------------------
# Refinement study
# --------------------------------------------------------------------------

def refine_study(spec: CoefficientSet, scheme: FdScheme, alpha: float,
                 levels: list[tuple[int, int]], x0: float | None = None,
                 reference: float | None = None) -> list[dict[str, Any]]:
    """u(t0, x0) over grids (n_space, n_steps), each refining the last.

    Rows carry the successive difference |u_i - u_{i-1}| and an empirical
    order in dt.  With ``reference`` the order is log(e_{i-1}/e_i)/log(dt ratio)
    for errors e_i = |u_i - reference|.  Without it the order comes from a
    pair of successive differences (the first pair serves both level 1 and
    level 2).  ``non_monotone`` flags a difference that grew.
    """
    if len(levels) < 3:
        raise ValueError("refine_study needs at least 3 levels")
    for (s0, n0), (s1, n1) in zip(levels, levels[1:]):
        if s1 != 2 * s0:
            raise ValueError(f"level ({s1}, {n1}) does not double n_space of ({s0}, {n0})")
        allowed = (4,) if scheme.theta == 0 else (2, 4)
        if n1 not in tuple(a * n0 for a in allowed):
            raise ValueError(f"level ({s1}, {n1}) must refine n_steps of ({s0}, {n0}) by "
                             f"{' or '.join(map(str, allowed))}x")
    if x0 is None:
        x0 = float(spec.params.get("strike", 0.5 * (scheme.x_min + scheme.x_max)))
    values, dts = [], []
    for ns, nt in levels:
        sch = FdScheme(scheme.theta, scheme.penalty_treatment, scheme.x_min, scheme.x_max, ns,
                       scheme.boundary)
        grid = TimeGrid(0.0, spec.horizon, nt)
        try:
            surf = solve_penalized_fd(spec, sch, grid, alpha)
        except StabilityError as exc:
            raise StabilityError(f"level ({ns}, {nt}): {exc}") from None
        values.append(surf.value_at(x0))
        dts.append(grid.dt)
    diffs = [None] + [abs(b - a) for a, b in zip(values, values[1:])]

    def order(e_prev, e_cur, i):
        if e_prev is None or e_cur is None or e_prev == 0 or e_cur == 0:
            return None
        return math.log(e_prev / e_cur) / math.log(dts[i - 1] / dts[i])

    rows = []
    for i, (lv, val) in enumerate(zip(levels, values)):
        if i == 0:
            p = None
        elif reference is not None:
            p = order(abs(values[i - 1] - reference), abs(val - reference), i)
        else:
            j = max(i, 2)
            p = order(diffs[j - 1], diffs[j], j) if j < len(diffs) else None
        rows.append({
            "level": i, "n_space": lv[0], "n_steps": lv[1], "u0": val,
            "delta_prev": diffs[i], "empirical_order": p,
            "non_monotone": bool(i >= 2 and diffs[i] > diffs[i - 1]),
        })
    return rows
