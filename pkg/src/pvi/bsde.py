"""Penalized BSDE solvers: least-squares Monte Carlo on path ensembles and exact
dynamic programming on the deterministic chain.

Both solve, backward in time,

    Y_k = E[Y_{k+1} | X_k] + (g + alpha * Phi^-)(t_k, X_k, Y_k, Z_k) dt,
    Z_k = E[Y_{k+1} dW_k | X_k] / dt,

and record the increasing part A_{k+1} = A_k + alpha * Phi^-(t_k, X_k, Y_k, Z_k) dt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial import legendre

from ._parallel import ordered_map
from .errors import ConditioningError, DivergenceError, StepSizeError
from .problem import CoefficientSet
from .sde import ChainDiscretization, PathEnsemble
from .surface import ValueSurface

IMPLICIT_TOL = 1e-12
REG_BLOCK = 16384
RIDGE = 1e-10
# dt * Lipschitz constant allowed for explicitly treated driver terms.
EXPLICIT_LIMIT = 0.5


# --------------------------------------------------------------------------
# Scalar implicit step
# --------------------------------------------------------------------------

def solve_implicit(G: Callable[[np.ndarray, np.ndarray], np.ndarray], c: np.ndarray, dt: float,
                   lip: float, monotone: bool, max_iter: int = 200) -> np.ndarray:
    """Solve ``y - dt * G(y) = c`` elementwise.

    ``G(y, idx)`` evaluates the generator for the entries ``idx``.  When
    ``monotone`` the map y -> y - dt G(y) is increasing with slope at least
    ``1 - dt * lip`` and the root is bracketed in closed form, then refined by
    the Illinois method.  Otherwise plain fixed-point iteration is used, which
    needs ``dt * lip < 1``.
    """
    c = np.asarray(c, dtype=float)
    idx = np.arange(c.size)
    if not monotone:
        if dt * lip >= 1:
            raise StepSizeError(f"fixed-point step needs dt*Lipschitz < 1, got {dt * lip:.3g}; "
                                "refine the time grid")
        y = c.copy()
        for _ in range(max_iter):
            new = c + dt * G(y, idx)
            if np.all(np.abs(new - y) <= IMPLICIT_TOL * (1 + np.abs(new))):
                return new
            y = new
        raise DivergenceError("implicit fixed-point iteration did not converge")

    if dt * lip >= 1:
        raise StepSizeError(f"implicit step needs dt*lip_g < 1, got {dt * lip:.3g}; refine the time grid")
    f_c = -dt * np.asarray(G(c, idx), dtype=float)
    y = c.copy()
    todo = np.flatnonzero(np.abs(f_c) > IMPLICIT_TOL * (1 + np.abs(c)))
    if todo.size == 0:
        return y
    # Root lies within |f(c)| / (1 - dt*lip) of c.
    reach = np.abs(f_c[todo]) / (1 - dt * lip) * (1 + 1e-9) + IMPLICIT_TOL * (1 + np.abs(c[todo]))
    a = c[todo].copy()
    fa = f_c[todo].copy()
    b = a - np.sign(fa) * reach
    fb = b - dt * G(b, todo) - c[todo]
    if np.any(np.sign(fa) == np.sign(fb)):
        raise DivergenceError("implicit step: bracket failed; the generator is not monotone in y")
    side = 0 * a
    for _ in range(max_iter):
        x = b - fb * (b - a) / (fb - fa)
        fx = x - dt * G(x, todo) - c[todo]
        done = (np.abs(fx) <= IMPLICIT_TOL * (1 + np.abs(x))) | (np.abs(b - a) <= IMPLICIT_TOL * (1 + np.abs(x)))
        y[todo[done]] = x[done]
        keep = ~done
        if not keep.any():
            return y
        a, b, fa, fb, x, fx, side, todo = (v[keep] for v in (a, b, fa, fb, x, fx, side, todo))
        same = np.sign(fx) == np.sign(fb)
        # Illinois: halve the stale endpoint's weight when it is retained twice.
        a_new = np.where(same, a, b)
        fa_new = np.where(same, np.where(side == 1, fa / 2, fa), fb)
        side = np.where(same, 1, -1)
        a, fa, b, fb = a_new, fa_new, x, fx
    raise DivergenceError("implicit step did not converge to tolerance")


# --------------------------------------------------------------------------
# Least-squares Monte Carlo
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionBasis:
    family: str = "polynomial"
    degree: int = 4
    n_knots: int = 8
    # Normalization box (lo, hi) per coordinate; None -> empirical quantiles.
    domain: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    quantiles: tuple[float, float] = (0.001, 0.999)
    # Equal-count path bundles, each with its own fit and min/max box.  A
    # single global degree-4 fit cannot follow the kink the constraint puts
    # into the value, and the penalty ratchets every dip below the obstacle.
    n_bundles: int = 8

    def __post_init__(self):
        if self.family not in ("polynomial", "piecewise-linear"):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.family == "polynomial" and self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.family == "piecewise-linear" and self.n_knots < 2:
            raise ValueError("n_knots must be >= 2")
        if self.n_bundles < 1:
            raise ValueError("n_bundles must be >= 1")

    def box(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.domain is not None:
            return np.asarray(self.domain[0], float), np.asarray(self.domain[1], float)
        return (np.quantile(x, self.quantiles[0], axis=0),
                np.quantile(x, self.quantiles[1], axis=0))

    def design(self, x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Basis matrix (n, n_basis); the first column is the constant."""
        n, d = x.shape
        u = 2.0 * (x - lo) / (hi - lo) - 1.0
        if self.family == "polynomial":
            per_dim = [legendre.legvander(u[:, i], self.degree) for i in range(d)]
            cols = []
            for powers in _multi_indices(d, self.degree):
                col = np.ones(n)
                for i, p in enumerate(powers):
                    if p:
                        col = col * per_dim[i][:, p]
                cols.append(col)
            return np.stack(cols, axis=1)
        knots = np.linspace(-1.0, 1.0, self.n_knots)
        h = knots[1] - knots[0]
        cols = [np.ones(n)]
        for i in range(d):
            uc = np.clip(u[:, i], -1.0, 1.0)
            hats = np.maximum(0.0, 1.0 - np.abs(uc[:, None] - knots[None, :]) / h)
            cols.extend(hats[:, 1:].T)
        return np.stack(cols, axis=1)


def _multi_indices(d: int, degree: int) -> list[tuple[int, ...]]:
    if d == 1:
        return [(p,) for p in range(degree + 1)]
    out = []
    for p in range(degree + 1):
        out.extend((p,) + rest for rest in _multi_indices(d - 1, degree - p))
    return sorted(out, key=lambda m: (sum(m), tuple(-v for v in m)))


class _Regressor:
    """Least squares onto basis(X_k), fitted separately on each bundle.

    Bundles are equal-count groups of paths ordered by the first state
    coordinate; each gets its own normalization box.  Cross products are
    accumulated in a fixed block order so results never depend on the worker
    count.
    """

    def __init__(self, basis: RegressionBasis, x: np.ndarray, step: int):
        self.step = step
        n = x.shape[0]
        if basis.n_bundles > 1:
            order = np.argsort(x[:, 0], kind="stable")
            groups = [g for g in np.array_split(order, basis.n_bundles) if g.size]
        else:
            groups = [np.arange(n)]
        self.groups = groups
        self.fits = [self._prepare(basis, x[g]) for g in groups]

    def _prepare(self, basis, x):
        if len(self.groups) > 1:
            lo, hi = x.min(axis=0), x.max(axis=0)
        else:
            lo, hi = basis.box(x)
        flat = np.all(hi - lo <= 1e-12 * (1 + np.abs(lo)))
        blocks = [slice(s, min(s + REG_BLOCK, x.shape[0])) for s in range(0, x.shape[0], REG_BLOCK)]
        if flat:
            mats = [np.ones((sl.stop - sl.start, 1)) for sl in blocks]
        else:
            hi = np.where(hi - lo > 0, hi, lo + 1.0)
            mats = ordered_map(lambda sl: basis.design(x[sl], lo, hi), blocks)
        gram = sum(m.T @ m for m in mats)
        eig = np.linalg.eigvalsh(gram)
        if not np.all(np.isfinite(eig)):
            raise ConditioningError(f"non-finite regression matrix at step {self.step}")
        if eig[0] <= 1e-13 * eig[-1]:
            gram = gram + RIDGE * np.trace(gram) * np.eye(gram.shape[0])
            eig = np.linalg.eigvalsh(gram)
            if eig[0] <= 1e-15 * eig[-1]:
                raise ConditioningError(
                    f"regression is rank deficient beyond ridge repair at step {self.step}")
        offs = np.cumsum([0] + [m.shape[0] for m in mats])
        return mats, offs, gram

    def fit(self, target: np.ndarray) -> np.ndarray:
        """Fitted conditional expectation of ``target`` (n,) or (n, m)."""
        out = np.empty_like(target, dtype=float)
        for g, (mats, offs, gram) in zip(self.groups, self.fits):
            tg = target[g]
            rhs = sum(m.T @ tg[offs[i]:offs[i + 1]] for i, m in enumerate(mats))
            coef = np.linalg.solve(gram, rhs)
            if not np.all(np.isfinite(coef)):
                raise ConditioningError(f"non-finite regression coefficients at step {self.step}")
            out[g] = np.concatenate([m @ coef for m in mats])
        return out


@dataclass(frozen=True, eq=False)
class PenalizedBsdeSolution:
    y: np.ndarray            # (n_paths, n_steps + 1)
    z: np.ndarray            # (n_paths, n_steps, dim)
    a: np.ndarray            # (n_paths, n_steps + 1)
    alpha: float
    y0: float
    y0_stderr: float
    # Constraint value Phi(t_k, X_k, Y_k, Z_k); the last column uses Z_{n-1}.
    phi: np.ndarray          # (n_paths, n_steps + 1)
    ensemble: PathEnsemble


def _explicit_checks(spec: CoefficientSet, dt: float, alpha: float) -> None:
    if dt * spec.lip_g > EXPLICIT_LIMIT:
        raise StepSizeError(f"dt*lip_g = {dt * spec.lip_g:.3g} exceeds {EXPLICIT_LIMIT}; refine the time grid")
    if not spec.phi_monotone_y and dt * (spec.lip_g + alpha * spec.lip_phi) > EXPLICIT_LIMIT:
        raise StepSizeError(
            f"dt*(lip_g + alpha*lip_phi) = {dt * (spec.lip_g + alpha * spec.lip_phi):.3g} exceeds "
            f"{EXPLICIT_LIMIT} and the constraint is not declared monotone in y; refine the time grid")


def solve_penalized_lsmc(ensemble: PathEnsemble, spec: CoefficientSet, alpha: float,
                         basis: RegressionBasis | None = None, picard_iters: int = 2,
                         a_mode: str = "penalty") -> PenalizedBsdeSolution:
    """Backward regression scheme for the penalized BSDE along simulated paths.

    At each step the continuation C_k and Z_k come from regressing Y_{k+1} and
    (Y_{k+1} - C_k) dW_k / dt on basis(X_k).  Then ``picard_iters`` passes of

        Y <- root of  Y = C_k + g(Y_prev) dt + alpha Phi^-(Y) dt

    starting from Y = C_k: the driver g is corrected by Picard iteration while
    the stiff penalty is solved implicitly (monotone root) so that
    dt * alpha may be large.

    ``a_mode="literal"`` accumulates (g + alpha Phi^-) dt instead of the
    penalty alone; that variant need not be nondecreasing.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if picard_iters < 1:
        raise ValueError("picard_iters must be >= 1")
    if a_mode not in ("penalty", "literal"):
        raise ValueError(f"unknown a_mode {a_mode!r}")
    grid = ensemble.grid
    if not math.isclose(grid.t_end, spec.horizon, abs_tol=1e-12):
        raise ValueError("ensemble horizon does not match the problem horizon")
    basis = basis or RegressionBasis()
    dt, n = grid.dt, grid.n_steps
    _explicit_checks(spec, dt, alpha)
    X, dW = ensemble.states, ensemble.increments
    P, d = X.shape[0], X.shape[2]

    y = np.empty((P, n + 1))
    z = np.empty((P, n, d))
    a_inc = np.zeros((P, n))
    phi = np.empty((P, n + 1))
    y[:, n] = np.asarray(spec.terminal(X[:, n]), dtype=float)

    for k in range(n - 1, -1, -1):
        tk = grid.t(k)
        xk = X[:, k]
        reg = _Regressor(basis, xk, k)
        cont = reg.fit(y[:, k + 1])
        # Centring by the continuation removes the constant part of Y_{k+1}
        # from the Z target without changing its conditional mean.
        zk = reg.fit((y[:, k + 1] - cont)[:, None] * dW[:, k] / dt)
        zk = zk.reshape(P, d)

        def pen(v, idx, xk=xk, zk=zk, tk=tk):
            return alpha * spec.penalty(tk, xk[idx], v, zk[idx])

        yk = cont
        for _ in range(picard_iters):
            rhs = cont + dt * np.asarray(spec.driver(tk, xk, yk, zk), dtype=float)
            if alpha == 0:
                yk = rhs
            else:
                yk = solve_implicit(pen, rhs, dt, 0.0, spec.phi_monotone_y)
        if not np.all(np.isfinite(yk)):
            raise DivergenceError(f"non-finite Y at step {k}; dt*(lip_g + alpha*lip_phi) "
                                  f"= {dt * (spec.lip_g + alpha * spec.lip_phi):.3g} may be too large")
        phik = np.asarray(spec.constraint(tk, xk, yk, zk), dtype=float)
        inc = alpha * np.maximum(-phik, 0.0) * dt
        if a_mode == "literal":
            inc = inc + np.asarray(spec.driver(tk, xk, yk, zk), dtype=float) * dt
        y[:, k], z[:, k], a_inc[:, k], phi[:, k] = yk, zk, inc, phik

    phi[:, n] = np.asarray(spec.constraint(grid.t_end, X[:, n], y[:, n], z[:, n - 1]), dtype=float)
    a = np.zeros((P, n + 1))
    np.cumsum(a_inc, axis=1, out=a[:, 1:])
    y0 = float(np.mean(y[:, 0]))
    y0_stderr = float(np.std(y[:, 1], ddof=1) / math.sqrt(P)) if P > 1 else float("nan")
    return PenalizedBsdeSolution(y, z, a, float(alpha), y0, y0_stderr, phi, ensemble)


def increasing_part_stats(sol: PenalizedBsdeSolution) -> dict[str, float]:
    totals = sol.a[:, -1]
    return {
        "mean_total": float(np.mean(totals)),
        "max_total": float(np.max(totals)),
        "fraction_active": float(np.mean(sol.phi[:, :-1] < 0)),
    }


# --------------------------------------------------------------------------
# Chain dynamic programming
# --------------------------------------------------------------------------

def solve_penalized_chain(spec: CoefficientSet, chain: ChainDiscretization,
                          alpha: float) -> ValueSurface:
    """Exact backward recursion on the chain with the y-argument implicit."""
    if spec.dim != 1:
        raise ValueError("the chain solver is 1D only")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    grid = chain.grid
    dt, n = grid.dt, grid.n_steps
    x = chain.x
    xc = x[:, None]
    u = np.empty((n + 1, x.size))
    inc = np.zeros((n, x.size))
    u[n] = np.asarray(spec.terminal(xc), dtype=float)
    lip = spec.lip_g if spec.phi_monotone_y else spec.lip_g + alpha * spec.lip_phi
    for k in range(n - 1, -1, -1):
        tk = grid.t(k)
        cont = chain.expectation(k, u[k + 1])
        zk = (chain.dw_expectation(k, u[k + 1]) / dt)[:, None]

        def gen(v, idx, tk=tk, zk=zk):
            out = np.asarray(spec.driver(tk, xc[idx], v, zk[idx]), dtype=float)
            if alpha:
                out = out + alpha * spec.penalty(tk, xc[idx], v, zk[idx])
            return out

        try:
            u[k] = solve_implicit(gen, cont, dt, lip, spec.phi_monotone_y)
        except StepSizeError as exc:
            raise StepSizeError(f"step {k}, alpha={alpha}: {exc}") from None
        if alpha:
            inc[k] = alpha * spec.penalty(tk, xc, u[k], zk) * dt
    return ValueSurface(grid.times, x.copy(), u, float(alpha), "constant-extension", "chain",
                        increments=inc)


def chain_expected_total(chain: ChainDiscretization, increments: np.ndarray) -> np.ndarray:
    """E[sum_k increments_k(X_k) | X_0 = x_j] for every node j."""
    m = np.zeros(chain.n_x)
    for k in range(chain.grid.n_steps - 1, -1, -1):
        m = increments[k] + chain.expectation(k, m)
    return m
