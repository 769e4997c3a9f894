import json
import math
import subprocess
import sys

import numpy as np
import pytest
import yaml

from diffmdp.cli import main
from diffmdp.config import load_config
from diffmdp.errors import ConfigError
from diffmdp.evaluation import SWEEP_COLUMNS, read_sweep_csv
from diffmdp.mdp import load_kernel
from diffmdp.solvers import load_solution


def write_cfg(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def run(*argv):
    return main([str(a) for a in argv])


def fixture_cfg(fixtures_dir, name, tmp_path, **overrides):
    data = yaml.safe_load((fixtures_dir / name).read_text())
    data.update(overrides)
    return write_cfg(tmp_path, data, name)


# --- build-kernel ------------------------------------------------------------

def test_three_node_kernel(fixtures_dir, tmp_path):
    assert run("build-kernel", "--config", fixtures_dir / "three_node_uncontrolled.yaml", "--out", tmp_path / "a") == 0
    K = load_kernel(tmp_path / "a" / "kernel.bin")
    assert K.n_states == 3 and K.n_actions == 1
    assert K.dense().shape == (1, 3, 3)


def test_kernel_file_byte_identical(fixtures_dir, tmp_path):
    cfg = fixtures_dir / "three_node_uncontrolled.yaml"
    run("build-kernel", "--config", cfg, "--out", tmp_path / "a")
    run("build-kernel", "--config", cfg, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "kernel.bin").read_bytes() == (tmp_path / "b" / "kernel.bin").read_bytes()
    run("build-kernel", "--config", cfg, "--out", tmp_path / "c", "--seed", "12")
    assert (tmp_path / "a" / "kernel.bin").read_bytes() != (tmp_path / "c" / "kernel.bin").read_bytes()


def test_benchmark_kernel_audit_logged(fixtures_dir, tmp_path, capsys):
    cfg = fixture_cfg(fixtures_dir, "benchmark_small.yaml", tmp_path, kernel={"samples": 500})
    assert run("build-kernel", "--config", cfg, "--out", tmp_path) == 0
    captured = capsys.readouterr()
    assert "row-sum audit" in captured.err
    assert json.loads(captured.out)["max_row_deviation"] <= 1e-9


# --- solve -------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["discounted", "average"])
def test_two_node_matches_golden(fixtures_dir, tmp_path, kind):
    assert run("solve", "--kind", kind, "--config", fixtures_dir / "two_node.yaml", "--out", tmp_path) == 0
    sol, pol = load_solution(tmp_path / f"solution_{kind}.json")
    gold = json.loads((fixtures_dir / f"two_node_golden_{kind}.json").read_text())
    assert np.max(np.abs(sol.values - gold["values"])) <= 1e-10
    assert pol.tolist() == gold["policy"]
    if kind == "average":
        assert abs(sol.gain - gold["gain"]) <= 1e-10 / 0.1


def test_single_node_scalar_solution(fixtures_dir, tmp_path):
    run("solve", "--config", fixtures_dir / "single_node.yaml", "--out", tmp_path)
    sol, pol = load_solution(tmp_path / "solution_discounted.json")
    assert sol.values.shape == (1,) and sol.values[0] == pytest.approx(0.4, abs=1e-12)
    assert pol.tolist() == [0]


def test_constant_cost_constant_values(fixtures_dir, tmp_path):
    run("solve", "--config", fixtures_dir / "const_cost.yaml", "--out", tmp_path)
    sol, _ = load_solution(tmp_path / "solution_discounted.json")
    assert np.allclose(sol.values, 0.1 / (1 - math.exp(-0.1)), atol=1e-8)


def test_solve_from_kernel_file(fixtures_dir, tmp_path):
    cfg = fixtures_dir / "const_cost.yaml"
    run("build-kernel", "--config", cfg, "--out", tmp_path)
    data = yaml.safe_load(cfg.read_text())
    data["kernel"] = {"file": str(tmp_path / "kernel.bin")}
    data["h"] = 0.1
    p = write_cfg(tmp_path, data, "from_file.yaml")
    assert run("solve", "--kind", "average", "--config", p, "--out", tmp_path / "s") == 0
    sol, _ = load_solution(tmp_path / "s" / "solution_average.json")
    assert sol.gain == pytest.approx(1.0, abs=1e-9)


# --- sweep -------------------------------------------------------------------

def test_constant_cost_sweep(fixtures_dir, tmp_path):
    assert run("sweep", "--config", fixtures_dir / "const_cost.yaml", "--out", tmp_path) == 0
    rows = read_sweep_csv(tmp_path / "sweep.csv")
    assert list(rows[0]) == SWEEP_COLUMNS
    for r in rows:
        h = float(r["h"])
        assert float(r["J_star_x0"]) == pytest.approx(h / (1 - math.exp(-h)), abs=1e-8)
        assert float(r["rho_h"]) == pytest.approx(1.0, abs=1e-9)
    manifest = json.loads((tmp_path / "sweep_manifest.json").read_text())
    assert manifest["master_seed"] == 5 and len(manifest["config_sha256"]) == 64
    assert {"numpy", "scipy", "python", "diffmdp"} <= set(manifest["versions"])


def test_benchmark_sweep_gap_monotone_and_reproducible(fixtures_dir, tmp_path):
    cfg = fixture_cfg(fixtures_dir, "benchmark_small.yaml", tmp_path, kernel={"estimator": "quadrature"})
    run("sweep", "--config", cfg, "--out", tmp_path / "a")
    run("sweep", "--config", cfg, "--out", tmp_path / "b")
    a = (tmp_path / "a" / "sweep.csv").read_bytes()
    assert a == (tmp_path / "b" / "sweep.csv").read_bytes()
    gaps = [float(r["gap_vs_ref"]) for r in read_sweep_csv(tmp_path / "a" / "sweep.csv")]
    assert gaps[0] >= gaps[1] >= gaps[2] == 0.0


# --- lyapunov ------------------------------------------------------------------

def test_lyapunov_benchmark_passes(fixtures_dir, tmp_path):
    cfg = fixture_cfg(fixtures_dir, "benchmark_small.yaml", tmp_path, kernel={"estimator": "quadrature"})
    assert run("lyapunov", "--config", cfg, "--out", tmp_path) == 0
    rec = json.loads((tmp_path / "lyapunov.json").read_text())
    assert rec["passed"]
    checks = [r["check"] for r in rec["reports"]]
    assert checks == ["continuous_drift"] + ["discrete_drift"] * 3
    for r in rec["reports"]:
        assert set(r) == {"check", "pass", "worst_violation", "location", "constants", "flags"}


def test_lyapunov_trivial_certificate_flagged(fixtures_dir, tmp_path):
    cfg = fixture_cfg(fixtures_dir, "benchmark_small.yaml", tmp_path, h_list=[0.2],
                      kernel={"estimator": "quadrature"}, certificate={"kind": "zero", "C0": 1.0})
    run("lyapunov", "--config", cfg, "--out", tmp_path)
    cont = json.loads((tmp_path / "lyapunov.json").read_text())["reports"][0]
    assert cont["pass"] and any("inf-compact" in f for f in cont["flags"])


def test_lyapunov_identity_fixture_infeasible(fixtures_dir, tmp_path):
    assert run("lyapunov", "--config", fixtures_dir / "identity_kernel.yaml", "--out", tmp_path) == 0
    rec = json.loads((tmp_path / "lyapunov.json").read_text())
    assert not rec["passed"] and rec["reports"][0]["flags"]


def test_lyapunov_invariant_experiment(fixtures_dir, tmp_path):
    cfg = fixture_cfg(fixtures_dir, "benchmark_small.yaml", tmp_path, h_list=[0.2, 0.1],
                      kernel={"estimator": "quadrature"}, invariant={"T": 200, "replicas": 4, "burn_in": 2})
    run("lyapunov", "--config", cfg, "--out", tmp_path)
    rec = json.loads((tmp_path / "lyapunov.json").read_text())
    assert len(rec["invariant"]["bl_distance"]) == 2
    assert (tmp_path / "invariant.csv").read_text().startswith("h,grid_n,bl_distance")
    assert (tmp_path / "measure_diffusion.csv").exists() and (tmp_path / "measure_chain_h0.1.csv").exists()


# --- rollout and coupling ------------------------------------------------------

def test_rollout_command(fixtures_dir, tmp_path):
    cfg = fixture_cfg(fixtures_dir, "benchmark_small.yaml", tmp_path, kernel={"estimator": "quadrature"},
                      rollout={"policy": "average", "replications": 20, "tol": 0.05, "erg_T": 5,
                               "erg_burn_in": 1, "erg_replications": 5})
    assert run("rollout", "--config", cfg, "--out", tmp_path, "--seed", "3") == 0
    rec = json.loads((tmp_path / "rollout.json").read_text())
    assert rec["master_seed"] == 3 and rec["solution_kind"] == "ergodic"
    assert rec["discounted"]["mean"] > 0 and rec["ergodic"]["replications"] == 5


def test_rollout_from_solution_file(fixtures_dir, tmp_path):
    base = yaml.safe_load((fixtures_dir / "benchmark_small.yaml").read_text())
    base["kernel"] = {"estimator": "quadrature"}
    cfg = write_cfg(tmp_path, base)
    run("solve", "--config", cfg, "--out", tmp_path)
    base["rollout"] = {"solution": "solution_discounted.json", "replications": 10, "tol": 0.1,
                       "erg_T": 2, "erg_burn_in": 0.5, "erg_replications": 2}
    cfg2 = write_cfg(tmp_path, base, "r.yaml")
    assert run("rollout", "--config", cfg2, "--out", tmp_path / "r") == 0


def test_coupling_command(fixtures_dir, tmp_path):
    cfg = fixture_cfg(fixtures_dir, "benchmark_small.yaml", tmp_path, coupling={"replications": 50, "horizon": 0.4})
    assert run("coupling", "--config", cfg, "--out", tmp_path) == 0
    rec = json.loads((tmp_path / "coupling.json").read_text())
    assert len(rec["Z"]) == 3 and rec["slope"] is not None
    assert (tmp_path / "coupling.csv").read_text().splitlines()[0] == "h,N,Z,master_seed"


# --- errors and exit codes ----------------------------------------------------

def test_unknown_key_rejected(fixtures_dir, tmp_path, capsys):
    cfg = fixture_cfg(fixtures_dir, "const_cost.yaml", tmp_path, kernal={"samples": 3})
    assert run("solve", "--config", cfg, "--out", tmp_path) == 2
    assert "kernal" in capsys.readouterr().err


def test_nested_unknown_key_reports_location(fixtures_dir, tmp_path, capsys):
    cfg = fixture_cfg(fixtures_dir, "const_cost.yaml", tmp_path, kernel={"sampels": 3})
    assert run("build-kernel", "--config", cfg, "--out", tmp_path) == 2
    assert "kernel.sampels" in capsys.readouterr().err


@pytest.mark.parametrize("bad", [
    {"h_list": [0.1, 0.2]},
    {"alpha": -1.0},
    {"model": "nope"},
    {"kernel": {"samples": 0}},
    {"kernel": {"file": "missing.bin"}},
])
def test_config_errors_exit_2(fixtures_dir, tmp_path, bad):
    cfg = fixture_cfg(fixtures_dir, "const_cost.yaml", tmp_path, **bad)
    assert run("solve", "--config", cfg, "--out", tmp_path) == 2


def test_missing_config_exit_2(tmp_path):
    assert run("solve", "--config", tmp_path / "nope.yaml") == 2


def test_model_and_tabular_are_exclusive(fixtures_dir, tmp_path):
    data = yaml.safe_load((fixtures_dir / "two_node.yaml").read_text())
    data["model"] = "bounded_ou"
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path, data))


def test_numerical_failure_exit_3(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"tabular": {"h": 0.1, "P": [[[0, 1], [1, 0]]], "stage_cost": [[1.0], [0.0]]},
                               "solver": {"max_iter": 200}})
    assert run("solve", "--kind", "average", "--config", cfg, "--out", tmp_path) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_console_entry_point(fixtures_dir, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "diffmdp.cli", "solve", "--config",
                           str(fixtures_dir / "single_node.yaml"), "--out", str(tmp_path), "-q"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["iterations"] > 0
