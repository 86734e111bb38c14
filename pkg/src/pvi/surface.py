"""Grid functions u(t_i, x_j) shared by the chain and finite-difference solvers."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


@dataclass(eq=False)
class ValueSurface:
    times: np.ndarray            # (n_t,) ascending
    x: np.ndarray                # (n_x,) ascending, uniform
    values: np.ndarray           # (n_t, n_x)
    alpha: float
    boundary: str
    method: str
    # Increasing-part increments charged over [t_k, t_{k+1}] at node j.
    increments: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.times.size, self.x.size):
            raise ValueError(f"values shape {self.values.shape} does not match grid "
                             f"({self.times.size}, {self.x.size})")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("surface contains non-finite values")

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def same_grid(self, other: "ValueSurface") -> bool:
        return (self.values.shape == other.values.shape
                and np.array_equal(self.times, other.times) and np.array_equal(self.x, other.x))

    def value_at(self, x: float, k: int = 0) -> float:
        """Four-point Lagrange interpolation of time level ``k`` at ``x``."""
        xs, row = self.x, self.values[k]
        j = int(np.searchsorted(xs, x))
        if j < xs.size and xs[j] == x:
            return float(row[j])
        lo = min(max(j - 2, 0), xs.size - 4)
        nodes = xs[lo:lo + 4]
        vals = row[lo:lo + 4]
        out = 0.0
        for a in range(4):
            w = 1.0
            for b in range(4):
                if a != b:
                    w *= (x - nodes[b]) / (nodes[a] - nodes[b])
            out += w * vals[a]
        return float(out)

    def metadata(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "method": self.method,
            "boundary": self.boundary,
            "grid": {
                "t0": float(self.times[0]), "t_end": float(self.times[-1]),
                "n_steps": int(self.times.size - 1),
                "x_min": float(self.x[0]), "x_max": float(self.x[-1]),
                "n_space": int(self.x.size - 1),
            },
            **self.meta,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,x,u\n")
        for i, t in enumerate(self.times):
            for j, xv in enumerate(self.x):
                buf.write(f"{t:.17g},{xv:.17g},{self.values[i, j]:.17g}\n")
        return buf.getvalue()


def write_surface(surface: ValueSurface, csv_path: str | Path) -> tuple[Path, Path]:
    """Write ``<name>.csv`` plus a ``<name>.json`` metadata sidecar."""
    csv_path = Path(csv_path)
    side = csv_path.with_suffix(".json")
    csv_path.write_text(surface.to_csv())
    side.write_text(json.dumps(surface.metadata(), indent=2) + "\n")
    return csv_path, side


def read_surface(csv_path: str | Path) -> ValueSurface:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != ["t", "x", "u"]:
            raise ValueError(f"{csv_path}: expected header t,x,u")
        rows = np.array([[float(v) for v in r] for r in reader])
    times = np.unique(rows[:, 0])
    xs = np.unique(rows[:, 1])
    values = rows[:, 2].reshape(times.size, xs.size)
    extra = {k: v for k, v in meta.items() if k not in ("alpha", "method", "boundary", "grid")}
    return ValueSurface(times, xs, values, meta["alpha"], meta["boundary"], meta["method"], meta=extra)
