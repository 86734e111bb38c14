import json
import subprocess
import sys

import pytest

from pvi.cli import emit_table, main, run_experiment, validate_config
from pvi.errors import ConfigError

FULL = {
    "problem": "obstacle_put", "method": "fd",
    "grid": {"n_steps": 40, "n_space": 40},
    "sweep": {"alphas": [1, 4, 16, 64]},
    "analyses": ["residual", "supersolution_family", "dominance", "skorohod", "refine"],
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def _err(capsys):
    return json.loads(capsys.readouterr().err)["error"]


def test_minimal_run(tmp_path):
    cfg = {"problem": "obstacle_put", "method": "projected", "grid": {"n_steps": 20, "n_space": 40}}
    manifest = json.loads(run_experiment(_write(tmp_path, cfg)).read_text())
    assert manifest["config"] == cfg
    assert [a["path"] for a in manifest["artifacts"]] == ["surface_projected.csv", "surface_projected.json"]
    for a in manifest["artifacts"]:
        assert (tmp_path / "pvi_out" / a["path"]).stat().st_size == a["bytes"]
        assert len(a["sha256"]) == 64


def test_minimal_chain_run_twice(tmp_path):
    cfg = {"problem": "unconstrained_linear", "method": "chain",
           "grid": {"n_steps": 50, "n_space": 100, "x_min": 20, "x_max": 500}, "sweep": {"alphas": [1]}}
    runs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        assert main(["run", str(_write(tmp_path / name, cfg))]) == 0
        runs.append(json.loads((tmp_path / name / "pvi_out" / "manifest.json").read_text()))
    assert len(runs[0]["artifacts"]) == 2
    assert sum(a["path"].endswith(".csv") for a in runs[0]["artifacts"]) == 1
    assert [a["sha256"] for a in runs[0]["artifacts"]] == [a["sha256"] for a in runs[1]["artifacts"]]
    # the echoed config is itself a valid config
    validate_config(runs[0]["config"])


def test_full_sweep_artifacts(tmp_path):
    manifest = json.loads(run_experiment(_write(tmp_path, FULL)).read_text())
    kinds = [a["kind"] for a in manifest["artifacts"]]
    assert len(kinds) == 16
    assert kinds.count("residual") == 4
    for k in ("convergence", "dominance", "skorohod", "refinement"):
        assert kinds.count(k) == 1
    out = tmp_path / "pvi_out"
    res = json.loads((out / "residual_alpha_64.json").read_text())
    assert [r["m"] for r in res["supersolution_family"][:3]] == [0.0, 10.0, 100.0]
    sk = json.loads((out / "skorohod.json").read_text())
    assert {r["at"] for r in sk["rows"]} == {"left", "right"}


def test_runs_are_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    cfg = {**FULL, "analyses": ["residual"]}
    ma = json.loads(run_experiment(_write(a, cfg)).read_text())
    mb = json.loads(run_experiment(_write(b, cfg)).read_text())
    assert ma == mb


def test_chain_and_lsmc_runs(tmp_path):
    chain = {"problem": "obstacle_put", "method": "chain", "grid": {"n_steps": 100, "n_space": 100,
             "x_max": 300}, "sweep": {"alphas": [0, 10]}, "output_dir": "c"}
    m = json.loads(run_experiment(_write(tmp_path, chain, "c.json")).read_text())
    assert len(m["artifacts"]) == 4
    lsmc = {"problem": "obstacle_put", "method": "lsmc", "grid": {"n_steps": 10},
            "mc": {"n_paths": 2000, "seed": 1}, "sweep": {"alphas": [0, 10]}, "output_dir": "m"}
    m = json.loads(run_experiment(_write(tmp_path, lsmc, "m.json")).read_text())
    assert [a["path"] for a in m["artifacts"]] == ["lsmc_alpha_0.json", "lsmc_alpha_10.json"]


def test_unknown_key_is_named(tmp_path, capsys):
    cfg = {**FULL, "grid": {"n_steps": 10, "n_spce": 10}}
    assert main(["run", str(_write(tmp_path, cfg))]) == 2
    err = _err(capsys)
    assert err["type"] == "ConfigError" and err["key"] == "grid.n_spce"


@pytest.mark.parametrize("patch,key", [
    ({"method": "monte"}, "method"),
    ({"sweep": {"alphas": [4, 1]}}, "sweep.alphas"),
    ({"grid": {"n_steps": 0}}, "grid.n_steps"),
])
def test_schema_errors(patch, key):
    with pytest.raises(ConfigError) as info:
        validate_config({**FULL, **patch})
    assert info.value.key == key


def test_lsmc_requires_seed(tmp_path, capsys):
    cfg = {"problem": "obstacle_put", "method": "lsmc", "grid": {"n_steps": 10},
           "mc": {"n_paths": 100}, "sweep": {"alphas": [0]}}
    assert main(["validate", str(_write(tmp_path, cfg))]) == 2
    assert _err(capsys)["key"] == "mc.seed"


def test_skorohod_needs_obstacle(tmp_path, capsys):
    cfg = {**FULL, "problem": {"name": "z_constraint", "params": {"slope": 0.5}}}
    assert main(["run", str(_write(tmp_path, cfg))]) == 2
    assert _err(capsys)["key"] == "analyses"


def test_projected_takes_no_analyses(tmp_path, capsys):
    cfg = {"problem": "obstacle_put", "method": "projected", "grid": {"n_steps": 10},
           "analyses": ["residual"]}
    assert main(["validate", str(_write(tmp_path, cfg))]) == 2
    assert _err(capsys)["key"] == "analyses"


def test_validate_ok(tmp_path, capsys):
    assert main(["validate", str(_write(tmp_path, FULL))]) == 0
    assert json.loads(capsys.readouterr().out) == {"valid": True}


def test_bad_json(tmp_path, capsys):
    p = tmp_path / "x.json"
    p.write_text("{nope")
    assert main(["validate", str(p)]) == 2
    assert _err(capsys)["key"] == "<root>"


def test_tables(tmp_path, capsys):
    run_experiment(_write(tmp_path, FULL))
    out = tmp_path / "pvi_out"
    lines = emit_table(out / "convergence_report.json", "alpha_convergence").splitlines()
    assert lines[0] == "alpha,u0,delta_prev,a_total" and len(lines) == 5
    assert lines[1].split(",")[2] == ""
    lines = emit_table(out / "refinement.json", "refinement").splitlines()
    assert lines[0] == "level,n_space,n_steps,u0,delta_prev,empirical_order" and len(lines) == 4
    assert lines[1].split(",")[-1] == "" and lines[2].split(",")[-1] != ""
    lines = emit_table(out / "residual_alpha_1.json", "residual_norms").splitlines()
    assert lines[0] == "alpha,sup_residual,l1_residual,nodes_pde_active,nodes_phi_active"
    assert main(["table", str(out / "refinement.json"), "--kind", "residual_norms"]) == 2
    assert _err(capsys)["key"] == "kind"


def test_console_entry_point(tmp_path):
    cfg = {"problem": "obstacle_put", "method": "projected", "grid": {"n_steps": 10, "n_space": 20}}
    proc = subprocess.run([sys.executable, "-m", "pvi.cli", "run", str(_write(tmp_path, cfg))],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["manifest"].endswith("manifest.json")
