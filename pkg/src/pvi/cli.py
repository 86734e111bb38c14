"""Config-driven experiment runner.

    pvi run <config.json>
    pvi table <report.json> --kind {alpha_convergence,refinement,residual_norms}
    pvi validate <config.json>

Failures print a JSON object {"error": {...}} on stderr and exit nonzero
(2 for configuration problems, 1 for solver errors).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import analysis as an
from .bsde import RegressionBasis, chain_expected_total, increasing_part_stats, solve_penalized_chain, solve_penalized_lsmc
from .errors import CatalogError, ConfigError, PviError
from .pde import FdScheme, expected_total, refine_study, solve_penalized_fd, solve_projected_obstacle_fd
from .problem import CoefficientSet, builtin_problem
from .sde import TimeGrid, build_chain, simulate_paths
from .surface import ValueSurface

# Parameters used when the problem is given by name only.
BENCHMARK = {"rate": 0.05, "vol": 0.2, "strike": 100.0}
SKOROHOD_EPS = 1e-3
TABLE_KINDS = ("alpha_convergence", "refinement", "residual_norms")


@lru_cache(maxsize=1)
def config_schema() -> dict[str, Any]:
    return json.loads(resources.files("pvi").joinpath("config.schema.json").read_text())


def _offending_key(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(set(err.instance) - allowed)
        return ".".join(filter(None, [path, extra[0] if extra else ""]))
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        return ".".join(filter(None, [path, missing[0] if missing else ""]))
    return path or "<root>"


def validate_config(raw: Any) -> None:
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        # oneOf failures hide the useful branch error; dig into the object branch.
        if err.context:
            err = min(err.context, key=lambda e: (-len(e.absolute_path), e.message))
        raise ConfigError(f"schema violation at {_offending_key(err)!r}: {err.message}",
                          _offending_key(err))
    alphas = raw.get("sweep", {}).get("alphas")
    if alphas and any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ConfigError("sweep.alphas must be strictly increasing", "sweep.alphas")


@dataclass
class ExperimentConfig:
    problem_name: str
    params: dict[str, float]
    method: str
    n_steps: int
    n_space: int
    x_min: float
    x_max: float
    x0: float
    n_paths: int = 100_000
    seed: int | None = None
    basis_degree: int = 4
    picard_iters: int = 2
    theta: float = 1.0
    penalty_treatment: str = "semi-implicit"
    alphas: list[float] = field(default_factory=list)
    analyses: list[str] = field(default_factory=list)
    output_dir: Path = Path(".")
    raw: dict[str, Any] = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base: Path = Path(".")) -> "ExperimentConfig":
        validate_config(raw)
        prob = raw["problem"]
        if isinstance(prob, str):
            name, params = prob, dict(BENCHMARK)
        else:
            name, params = prob["name"], dict(prob.get("params", {}))
        strike = float(params.get("strike", BENCHMARK["strike"]))
        grid, mc, sch = raw["grid"], raw.get("mc", {}), raw.get("scheme", {})
        out = raw.get("output_dir")
        cfg = cls(
            problem_name=name, params=params, method=raw["method"],
            n_steps=grid["n_steps"], n_space=grid.get("n_space", 400),
            x_min=float(grid.get("x_min", strike / 5)), x_max=float(grid.get("x_max", 5 * strike)),
            x0=float(grid.get("x0", strike)),
            n_paths=mc.get("n_paths", 100_000), seed=mc.get("seed"),
            basis_degree=mc.get("basis_degree", 4), picard_iters=mc.get("picard_iters", 2),
            theta=float(sch.get("theta", 1.0)),
            penalty_treatment=sch.get("penalty_treatment", "semi-implicit"),
            alphas=[float(a) for a in raw.get("sweep", {}).get("alphas", [])],
            analyses=list(raw.get("analyses", [])),
            output_dir=(base / out) if out else base / "pvi_out",
            raw=copy.deepcopy(raw),
        )
        cfg._check()
        try:
            cfg.problem()
        except CatalogError as exc:
            raise ConfigError(str(exc), "problem.params") from None
        return cfg

    def _check(self):
        if not self.x_min < self.x0 < self.x_max:
            raise ConfigError(f"grid.x0={self.x0} must lie strictly inside [{self.x_min}, {self.x_max}]",
                              "grid.x0")
        surface_only = {"residual", "supersolution_family", "dominance", "refine"}
        if self.method == "lsmc":
            bad = sorted(surface_only & set(self.analyses))
            if bad:
                raise ConfigError(f"analyses {bad} need a value surface; method lsmc produces none",
                                  "analyses")
        if "refine" in self.analyses and self.method != "fd":
            raise ConfigError("analysis 'refine' is available for method fd only", "analyses")
        if self.method == "projected" and self.alphas:
            raise ConfigError("method projected takes no sweep.alphas", "sweep.alphas")
        if self.method == "projected" and self.analyses:
            raise ConfigError("method projected runs no analyses; use fd or chain with a sweep",
                              "analyses")

    def problem(self) -> CoefficientSet:
        return builtin_problem(self.problem_name, self.params)

    def scheme(self) -> FdScheme:
        return FdScheme(self.theta, self.penalty_treatment, self.x_min, self.x_max, self.n_space)


# --------------------------------------------------------------------------
# Artifact writing
# --------------------------------------------------------------------------

class ArtifactWriter:
    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)
        self.entries: list[dict[str, Any]] = []

    def _atomic(self, rel: str, data: bytes) -> None:
        dest = self.root / rel
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=dest.suffix)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, dest)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def write(self, rel: str, text: str, kind: str) -> str:
        data = text.encode()
        self._atomic(rel, data)
        self.entries.append({"path": rel, "kind": kind, "sha256": hashlib.sha256(data).hexdigest(),
                             "bytes": len(data)})
        return rel

    def json(self, rel: str, obj: Any, kind: str) -> str:
        return self.write(rel, json.dumps(_jsonable(obj), indent=2) + "\n", kind)

    def surface(self, stem: str, surface: ValueSurface, extra_meta: dict[str, Any]) -> str:
        rel = self.write(f"{stem}.csv", surface.to_csv(), "surface")
        self.json(f"{stem}.json", {**surface.metadata(), **extra_meta}, "surface_meta")
        return rel

    def manifest(self, config: dict[str, Any]) -> Path:
        body = {"config": config, "artifacts": self.entries}
        self._atomic("manifest.json", (json.dumps(body, indent=2) + "\n").encode())
        return self.root / "manifest.json"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _tag(alpha: float) -> str:
    return f"{alpha:g}".replace("+", "")


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------

def run_experiment(config_path: str | Path) -> Path:
    """Run the configured pipeline; returns the manifest path."""
    config_path = Path(config_path)
    try:
        raw = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{config_path}: not valid JSON ({exc})", "<root>") from None
    cfg = ExperimentConfig.from_dict(raw, config_path.parent)
    spec = cfg.problem()
    if "skorohod" in cfg.analyses and spec.obstacle is None:
        raise ConfigError(f"analysis 'skorohod' needs an obstacle-form constraint; "
                          f"{spec.name!r} is not", "analyses")
    out = ArtifactWriter(cfg.output_dir)
    grid = TimeGrid(0.0, spec.horizon, cfg.n_steps)

    if cfg.method == "projected":
        surf = solve_projected_obstacle_fd(spec, cfg.scheme(), grid)
        out.surface("surface_projected", surf, {"problem": spec.name})
        return out.manifest(cfg.raw)

    if cfg.method == "lsmc":
        _run_lsmc(cfg, spec, grid, out)
        return out.manifest(cfg.raw)

    chain = build_chain(spec, grid, cfg.x_min, cfg.x_max, cfg.n_space) if cfg.method == "chain" else None
    scheme = cfg.scheme() if cfg.method == "fd" else None
    if len(cfg.alphas) >= 4:
        res = an.SweepResources(grid, cfg.x0, scheme=scheme,
                                chain_space=(cfg.x_min, cfg.x_max, cfg.n_space) if chain else None)
        report = an.penalization_sweep(spec, cfg.method, cfg.alphas, res)
        surfaces = report.results
    else:
        report = None
        surfaces = []
        for a in cfg.alphas:
            try:
                surfaces.append(solve_penalized_chain(spec, chain, a) if chain is not None
                                else solve_penalized_fd(spec, scheme, grid, a))
            except PviError as exc:
                raise type(exc)(f"alpha={a}: {exc}") from exc

    paths = [out.surface(f"surface_alpha_{_tag(a)}", s, {"problem": spec.name})
             for a, s in zip(cfg.alphas, surfaces)]
    if report is not None:
        report.surfaces_meta = paths
        out.json("convergence_report.json", report.to_dict(), "convergence")

    if chain is not None:
        def expect(inc):
            return chain_expected_total(chain, inc)
    else:
        def expect(inc):
            return expected_total(spec, scheme, grid, inc)

    if "residual" in cfg.analyses or "supersolution_family" in cfg.analyses:
        for a, s in zip(cfg.alphas, surfaces):
            rep = an.viscosity_residual(s, spec)
            body = rep.to_dict()
            tol = an.residual_tol(s.dx, a)
            body["tol"] = tol
            body["checks"] = rep.check(tol)
            if "supersolution_family" in cfg.analyses:
                body["supersolution_family"] = an.supersolution_family_residual(s, spec, [0.0, 10.0, 100.0])
            out.json(f"residual_alpha_{_tag(a)}.json", body, "residual")

    if "dominance" in cfg.analyses:
        out.json("dominance.json", _dominance(spec, cfg, grid, surfaces, scheme), "dominance")

    if "skorohod" in cfg.analyses:
        rows = []
        for a, s in zip(cfg.alphas, surfaces):
            for at in ("left", "right"):
                rows.append({"alpha": a, "at": at, "eps": SKOROHOD_EPS,
                             **an.skorohod_flatness_surface(s, spec, SKOROHOD_EPS, expect, cfg.x0, at)})
        out.json("skorohod.json", {"kind": "skorohod", "x0": cfg.x0, "rows": rows}, "skorohod")

    if "refine" in cfg.analyses:
        alpha = cfg.alphas[-1] if cfg.alphas else 0.0
        levels = [(cfg.n_space * 2**i, cfg.n_steps * 2**i) for i in range(3)]
        rows = refine_study(spec, scheme, alpha, levels, x0=cfg.x0)
        out.json("refinement.json", {"kind": "refinement", "alpha": alpha, "x0": cfg.x0, "rows": rows},
                 "refinement")
    return out.manifest(cfg.raw)


def _dominance(spec, cfg, grid, surfaces, scheme):
    like = surfaces[-1] if surfaces else None
    candidates: list[tuple[str, ValueSurface]] = []
    if like is not None:
        top = float(np.max(np.asarray(spec.terminal(like.x[:, None]), dtype=float)))
        candidates.append((f"constant({top:g})", an.constant_surface(like, top)))
    if spec.obstacle is not None and scheme is not None:
        candidates.append(("projected", solve_projected_obstacle_fd(spec, scheme, grid)))
        candidates.append(("projected_raised(1)",
                           solve_projected_obstacle_fd(an.shifted_obstacle(spec, 1.0), scheme, grid)))
    rows = []
    for a, s in zip(cfg.alphas, surfaces):
        for name, cand in candidates:
            rows.append({"alpha": a, "candidate": name, **an.dominance_check(s, cand)})
    return {"kind": "dominance", "rows": rows}


def _run_lsmc(cfg: ExperimentConfig, spec, grid, out: ArtifactWriter) -> None:
    ens = simulate_paths(spec, 0.0, cfg.x0, grid, cfg.n_paths, cfg.seed)
    basis = RegressionBasis(degree=cfg.basis_degree)
    if len(cfg.alphas) >= 4:
        res = an.SweepResources(grid, cfg.x0, ensemble=ens, basis=basis, picard_iters=cfg.picard_iters)
        report = an.penalization_sweep(spec, "lsmc", cfg.alphas, res)
        sols = report.results
    else:
        report = None
        sols = [solve_penalized_lsmc(ens, spec, a, basis, cfg.picard_iters) for a in cfg.alphas]
    paths = []
    for a, sol in zip(cfg.alphas, sols):
        body = {
            "kind": "lsmc_solution", "alpha": a, "seed": cfg.seed, "n_paths": cfg.n_paths,
            "n_steps": cfg.n_steps, "y0": sol.y0, "y0_stderr": sol.y0_stderr,
            "increasing_part": increasing_part_stats(sol),
            "mean_y": sol.y.mean(axis=0).tolist(), "mean_a": sol.a.mean(axis=0).tolist(),
        }
        if "skorohod" in cfg.analyses:
            body["skorohod"] = {at: an.skorohod_flatness(sol, spec, SKOROHOD_EPS, at)
                                for at in ("left", "right")}
        paths.append(out.json(f"lsmc_alpha_{_tag(a)}.json", body, "lsmc_solution"))
    if report is not None:
        report.surfaces_meta = paths
        out.json("convergence_report.json", report.to_dict(), "convergence")


# --------------------------------------------------------------------------
# Tables
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def emit_table(report_path: str | Path, kind: str) -> str:
    """Flat CSV for a report file."""
    if kind not in TABLE_KINDS:
        raise ConfigError(f"unknown table kind {kind!r}; use one of {TABLE_KINDS}", "kind")
    body = json.loads(Path(report_path).read_text())
    have = body.get("kind") if isinstance(body, dict) else None
    want = {"alpha_convergence": "convergence", "refinement": "refinement", "residual_norms": "residual"}[kind]
    if have != want:
        raise ConfigError(f"{report_path} is a {have!r} report; table kind {kind!r} needs {want!r}", "kind")
    buf = io.StringIO()
    if kind == "alpha_convergence":
        buf.write("alpha,u0,delta_prev,a_total\n")
        deltas = [None] + body["cauchy_deltas"]
        for row in zip(body["alphas"], body["u0"], deltas, body["a_totals"]):
            buf.write(",".join(_fmt(v) for v in row) + "\n")
    elif kind == "refinement":
        buf.write("level,n_space,n_steps,u0,delta_prev,empirical_order\n")
        for r in body["rows"]:
            buf.write(",".join(_fmt(r[k]) for k in ("level", "n_space", "n_steps", "u0", "delta_prev",
                                                    "empirical_order")) + "\n")
    else:
        buf.write("alpha,sup_residual,l1_residual,nodes_pde_active,nodes_phi_active\n")
        buf.write(",".join(_fmt(body[k]) for k in ("alpha", "sup_residual", "l1_residual",
                                                    "nodes_pde_active", "nodes_phi_active")) + "\n")
    return buf.getvalue()


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def _fail(exc: Exception, code: int) -> int:
    err = {"type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError) and exc.key is not None:
        err["key"] = exc.key
    sys.stderr.write(json.dumps({"error": err}) + "\n")
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}", "<argv>")


def main(argv: list[str] | None = None) -> int:
    parser = _Parser(prog="pvi", description="penalized constrained-BSDE experiments")
    sub = parser.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_tab = sub.add_parser("table", help="print a report as CSV")
    p_tab.add_argument("report")
    p_tab.add_argument("--kind", required=True, choices=TABLE_KINDS)
    p_val = sub.add_parser("validate", help="check a config against the schema")
    p_val.add_argument("config")
    try:
        args = parser.parse_args(argv)
        if args.verb == "run":
            manifest = run_experiment(args.config)
            print(json.dumps({"manifest": str(manifest)}))
        elif args.verb == "table":
            sys.stdout.write(emit_table(args.report, args.kind))
        else:
            path = Path(args.config)
            try:
                raw = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})", "<root>") from None
            ExperimentConfig.from_dict(raw, path.parent)
            print(json.dumps({"valid": True}))
        return 0
    except ConfigError as exc:
        return _fail(exc, 2)
    except (PviError, ValueError, ArithmeticError, OSError) as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
