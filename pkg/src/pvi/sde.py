"""Forward dynamics: Euler-Maruyama ensembles and a 1D moment-matched chain."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._parallel import ordered_map
from .errors import InfeasibleDiscretizationError, SimulationError
from .problem import CoefficientSet

# Paths per RNG block.  Fixed so that output never depends on worker count.
BLOCK_PATHS = 8192
MAGIC = b"PVI1"
PROB_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.t0 < self.t_end:
            raise ValueError(f"need t0 < t_end, got {self.t0} >= {self.t_end}")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def t(self, k: int) -> float:
        return self.t0 + k * self.dt


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    states: np.ndarray       # (n_paths, n_steps + 1, dim)
    increments: np.ndarray   # (n_paths, n_steps, dim)
    seed: int

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]


def _block_normals(seed: int, block: int, n_rows: int, n_steps: int, dim: int) -> np.ndarray:
    # Philox is counter based: block b always yields the same stream, and a
    # partial block is a prefix of the full one, so path p's increments depend
    # only on (seed, p).
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(block,))
    gen = np.random.Generator(np.random.Philox(ss))
    return gen.standard_normal((n_rows, n_steps, dim))


def simulate_paths(spec: CoefficientSet, t0: float, x0, grid: TimeGrid, n_paths: int,
                   seed: int) -> PathEnsemble:
    """Euler-Maruyama paths of dX = b dt + sigma dW started at ``x0``.

    Bitwise reproducible for a given ``(seed, n_paths, grid)`` regardless of
    ``PVI_THREADS``.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if grid.t0 != t0:
        raise ValueError(f"grid starts at {grid.t0}, expected t0={t0}")
    if not np.isclose(grid.t_end, spec.horizon, rtol=0, atol=1e-12):
        raise ValueError(f"grid ends at {grid.t_end}, problem horizon is {spec.horizon}")
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (spec.dim,))
    n, d, dt = grid.n_steps, spec.dim, grid.dt
    sqdt = np.sqrt(dt)

    def run_block(block: int):
        start = block * BLOCK_PATHS
        rows = min(BLOCK_PATHS, n_paths - start)
        dw = _block_normals(seed, block, rows, n, d) * sqdt
        xs = np.empty((rows, n + 1, d))
        xs[:, 0] = x0
        x = xs[:, 0]
        for k in range(n):
            tk = grid.t(k)
            b = np.asarray(spec.drift(tk, x), dtype=float)
            s = np.asarray(spec.diffusion(tk, x), dtype=float)
            x = x + b * dt + np.einsum("pij,pj->pi", s, dw[:, k])
            bad = ~np.all(np.isfinite(x), axis=1)
            if bad.any():
                p = start + int(np.flatnonzero(bad)[0])
                raise SimulationError(f"non-finite state on path {p} at step {k + 1}")
            xs[:, k + 1] = x
        return xs, dw

    n_blocks = -(-n_paths // BLOCK_PATHS)
    parts = ordered_map(run_block, range(n_blocks))
    states = np.concatenate([p[0] for p in parts])
    increments = np.concatenate([p[1] for p in parts])
    return PathEnsemble(grid, states, increments, int(seed))


def save_ensemble(ens: PathEnsemble, path: str | Path) -> None:
    """Binary dump: "PVI1", then dim, n_paths, n_steps, seed as little-endian
    int64, then states and increments as row-major little-endian float64."""
    header = MAGIC + struct.pack("<4q", ens.dim, ens.n_paths, ens.grid.n_steps, ens.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ens.states, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ens.increments, dtype="<f8").tobytes())


def load_ensemble(path: str | Path, grid: TimeGrid) -> PathEnsemble:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    dim, n_paths, n_steps, seed = struct.unpack("<4q", raw[4:36])
    if n_steps != grid.n_steps:
        raise ValueError(f"{path}: file has {n_steps} steps, grid has {grid.n_steps}")
    n_states = n_paths * (n_steps + 1) * dim
    body = np.frombuffer(raw, dtype="<f8", offset=36)
    if body.size != n_states + n_paths * n_steps * dim:
        raise ValueError(f"{path}: truncated payload")
    states = body[:n_states].reshape(n_paths, n_steps + 1, dim).astype(float)
    incs = body[n_states:].reshape(n_paths, n_steps, dim).astype(float)
    return PathEnsemble(grid, states, incs, seed)


# --------------------------------------------------------------------------
# Deterministic chain
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChainDiscretization:
    """Three-point stencil {-m dx, 0, +m dx} per (t_k, x_j).

    ``width`` holds m (0 when the node does not move).  Stencils reaching past
    the grid read the edge node (constant extension), so every node keeps the
    exact Euler moments while all weights stay nonnegative.
    """
    grid: TimeGrid
    x: np.ndarray        # (n_x,)
    width: np.ndarray    # (n_steps, n_x) int
    probs: np.ndarray    # (n_steps, n_x, 3): down, stay, up
    drift: np.ndarray    # (n_steps, n_x)  b(t_k, x_j)
    vol: np.ndarray      # (n_steps, n_x)  sigma(t_k, x_j)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def n_x(self) -> int:
        return self.x.size

    def _neighbours(self, k: int):
        j = np.arange(self.n_x)
        m = self.width[k]
        return np.clip(j - m, 0, self.n_x - 1), j, np.clip(j + m, 0, self.n_x - 1)

    def expectation(self, k: int, f_next: np.ndarray) -> np.ndarray:
        """E[f(X_{k+1}) | X_k = x_j] for every node j."""
        lo, mid, hi = self._neighbours(k)
        p = self.probs[k]
        return p[:, 0] * f_next[lo] + p[:, 1] * f_next[mid] + p[:, 2] * f_next[hi]

    def dw_expectation(self, k: int, f_next: np.ndarray) -> np.ndarray:
        """E[f(X_{k+1}) dW_k | X_k = x_j], reading dW off the stencil as
        (dX - b dt) / sigma; zero where sigma vanishes."""
        lo, mid, hi = self._neighbours(k)
        p = self.probs[k]
        dt = self.grid.dt
        jump = self.width[k] * self.dx
        b_dt = self.drift[k] * dt
        sig = self.vol[k]
        moved = (p[:, 0] * f_next[lo] * (-jump - b_dt) + p[:, 1] * f_next[mid] * (-b_dt)
                 + p[:, 2] * f_next[hi] * (jump - b_dt))
        out = np.zeros(self.n_x)
        nz = sig != 0
        out[nz] = moved[nz] / sig[nz]
        return out

    def moments(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-node mean and variance of the one-step displacement."""
        jump = self.width[k] * self.dx
        p = self.probs[k]
        mean = jump * (p[:, 2] - p[:, 0])
        second = jump**2 * (p[:, 2] + p[:, 0])
        return mean, second - mean**2


def _stencil(m1: np.ndarray, m2: np.ndarray, dx: float, max_width: int, k: int, x: np.ndarray):
    still = m2 <= 0.0
    lo = np.ceil(np.sqrt(np.where(still, 0.0, m2)) / dx - 1e-12)
    width = np.where(still, 0, np.maximum(lo, 1)).astype(np.int64)
    # p_down >= 0 requires m dx <= m2 / |m1|.
    with np.errstate(divide="ignore", invalid="ignore"):
        hi = np.where(np.abs(m1) > 0, m2 / (np.abs(m1) * dx), np.inf)
    bad = (~still) & ((width > hi * (1 + 1e-12)) | (width > max_width))
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise InfeasibleDiscretizationError(
            f"no nonnegative moment-matching stencil at step {k}, node {j} (x={x[j]:.6g}): "
            f"mean {m1[j]:.3g}, second moment {m2[j]:.3g}, dx {dx:.3g}; "
            "use a larger n_space or a smaller dt")
    s = width * dx
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(still, 0.0, m2 / s**2)
        r = np.where(still, 0.0, m1 / s)
    probs = np.stack([(q - r) / 2, 1 - q, (q + r) / 2], axis=-1)
    out = (probs < -PROB_TOL) | (probs > 1 + PROB_TOL)
    if out.any():
        j = int(np.argwhere(out)[0][0])
        raise InfeasibleDiscretizationError(
            f"transition probabilities {probs[j]} outside [0, 1] at step {k}, node {j} "
            f"(x={x[j]:.6g}); use a larger n_space or a smaller dt")
    return width, np.clip(probs, 0.0, 1.0)


def build_chain(spec: CoefficientSet, grid: TimeGrid, x_min: float, x_max: float,
                n_space: int) -> ChainDiscretization:
    """Moment-matched chain on ``n_space + 1`` uniform nodes of [x_min, x_max]."""
    if spec.dim != 1:
        raise ValueError("build_chain needs a 1D problem")
    if not x_min < x_max:
        raise ValueError("need x_min < x_max")
    if n_space < 2:
        raise ValueError("n_space must be >= 2")
    x = np.linspace(x_min, x_max, n_space + 1)
    dx = float(x[1] - x[0])
    dt = grid.dt
    n = grid.n_steps
    widths = np.empty((n, x.size), dtype=np.int64)
    probs = np.empty((n, x.size, 3))
    drifts = np.empty((n, x.size))
    vols = np.empty((n, x.size))
    for k in range(n):
        tk = grid.t(k)
        b = np.asarray(spec.drift(tk, x[:, None]), dtype=float)[:, 0]
        s = np.asarray(spec.diffusion(tk, x[:, None]), dtype=float)[:, 0, 0]
        m1 = b * dt
        m2 = s**2 * dt + m1**2
        widths[k], probs[k] = _stencil(m1, m2, dx, n_space, k, x)
        drifts[k], vols[k] = b, s
    return ChainDiscretization(grid, x, widths, probs, drifts, vols)
