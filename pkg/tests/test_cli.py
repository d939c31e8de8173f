"""End-to-end tests of the command line: exit codes, artifacts, manifest."""

import json
import subprocess
import sys

import numpy as np
import pytest


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "twoscale.cli", *args],
                          capture_output=True, text=True, timeout=600)


# ---------------------------------------------------------------------------
# configuration errors exit with status 2


def test_missing_preset_names_available(tmp_path):
    res = run_cli("rate", "--out", str(tmp_path / "o"),
                  "--set", "run.preset=nosuch")
    assert res.returncode == 2
    assert "available presets" in res.stderr
    assert "ou_rho" in res.stderr and "doublewell" in res.stderr


def test_unknown_key_in_config_file(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[run]\nbogus = 1\n")
    res = run_cli("simulate", "--config", str(cfg),
                  "--out", str(tmp_path / "o"))
    assert res.returncode == 2
    assert "bogus" in res.stderr


def test_unknown_section_rejected(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[nosec]\nkey = 1\n")
    res = run_cli("simulate", "--config", str(cfg),
                  "--out", str(tmp_path / "o"))
    assert res.returncode == 2


def test_unknown_set_key(tmp_path):
    res = run_cli("simulate", "--out", str(tmp_path / "o"),
                  "--set", "sim.bogus=1")
    assert res.returncode == 2


def test_bad_literal(tmp_path):
    res = run_cli("simulate", "--out", str(tmp_path / "o"),
                  "--set", "grid.cells=abc")
    assert res.returncode == 2
    assert "cells" in res.stderr


def test_unsupported_schema_version(tmp_path):
    res = run_cli("simulate", "--out", str(tmp_path / "o"),
                  "--set", "run.schema=2")
    assert res.returncode == 2
    assert "schema" in res.stderr


def test_substep_violation_is_config_error(tmp_path):
    res = run_cli("simulate", "--out", str(tmp_path / "o"),
                  "--set", "sim.eps=0.001")
    assert res.returncode == 2
    assert "substep" in res.stderr.lower()


# ---------------------------------------------------------------------------
# artifacts and the manifest


def test_simulate_outputs_and_manifest(tmp_path):
    out = tmp_path / "o"
    res = run_cli("simulate", "--out", str(out), "--seed", "4",
                  "--set", "sim.replicas=2")
    assert res.returncode == 0, res.stderr
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 4
    assert man["subcommand"] == "simulate"
    assert man["config"]["run"]["preset"] == "ou"
    assert man["config"]["sim"]["replicas"] == 2
    assert man["wall_time_s"] >= 0.0
    assert "twoscale" in man["versions"] and "numpy" in man["versions"]
    assert set(man["outputs"]) == {"slow_paths.csv", "occupation.csv"}
    header = (out / "slow_paths.csv").read_text().splitlines()[0]
    assert header == "replica,t,X_1"


def test_simulate_reruns_bit_exact(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        res = run_cli("simulate", "--out", str(out), "--seed", "9")
        assert res.returncode == 0, res.stderr
    assert (a / "slow_paths.csv").read_bytes() == \
        (b / "slow_paths.csv").read_bytes()
    assert (a / "occupation.csv").read_bytes() == \
        (b / "occupation.csv").read_bytes()


def test_stationary_conditions_report(tmp_path):
    out = tmp_path / "o"
    res = run_cli("stationary", "--out", str(out))
    assert res.returncode == 0, res.stderr
    cond = json.loads((out / "conditions.json").read_text())
    for key in ("ellipticity_margin", "angle_margin", "stability_worst",
                "lattice"):
        assert key in cond
    rows = np.loadtxt(out / "stationary.csv", delimiter=",", skiprows=1)
    assert rows.shape == (400, 2)
    # midpoint quadrature of the density column is one
    assert abs(np.sum(rows[:, 1]) * 0.04 - 1.0) < 1e-8


def test_cell_reports_corrected_mobility(tmp_path):
    out = tmp_path / "o"
    res = run_cli("cell", "--out", str(out), "--set", "run.preset=ou_rho",
                  "--set", "run.rho=0.5")
    assert res.returncode == 0, res.stderr
    q = json.loads((out / "cell_q.json").read_text())
    assert abs(q["q"][0][0] - 0.75) < 1e-6
    header = (out / "cell_faces_axis1.csv").read_text().splitlines()[0]
    assert header == "x_1,phi,psi_1"


def test_rho_outside_ou_rho_rejected(tmp_path):
    res = run_cli("cell", "--out", str(tmp_path / "o"),
                  "--set", "run.rho=0.5")
    assert res.returncode == 2


def test_zero_cost_then_rate_roundtrip(tmp_path):
    zc, rt = tmp_path / "zc", tmp_path / "rt"
    res = run_cli("zero-cost", "--out", str(zc),
                  "--set", "run.preset=linear")
    assert res.returncode == 0, res.stderr
    summary = json.loads((zc / "zero_cost.json").read_text())
    assert summary["converged"] and summary["iterations"] <= 50
    assert summary["rate_total"] <= 1e-4
    res = run_cli("rate", "--out", str(rt), "--set", "run.preset=linear",
                  "--set", f"rate.path_csv={zc / 'zero_cost_path.csv'}",
                  "--set", f"rate.flow_csv={zc / 'zero_cost_flow.csv'}")
    assert res.returncode == 0, res.stderr
    assert "rate total" in res.stdout
    bd = json.loads((rt / "rate.json").read_text())
    assert bd["total"] <= 1e-4
    header = (rt / "lambda_hat.csv").read_text().splitlines()[0]
    assert header == "t,lambda_1"


def test_rate_defaults_to_zero_cost_pair(tmp_path):
    out = tmp_path / "o"
    res = run_cli("rate", "--out", str(out), "--set", "run.preset=linear")
    assert res.returncode == 0, res.stderr
    bd = json.loads((out / "rate.json").read_text())
    assert bd["total"] <= 1e-4


def test_verify_lln_values(tmp_path):
    out = tmp_path / "o"
    res = run_cli("verify", "--out", str(out),
                  "--set", "verify.experiment=lln",
                  "--set", "verify.eps_ladder=0.1,0.01")
    assert res.returncode == 0, res.stderr
    rows = np.loadtxt(out / "lln.csv", delimiter=",", skiprows=1)
    assert rows[0, 1] == pytest.approx(0.17149593, abs=1e-6)
    assert rows[1, 1] == pytest.approx(0.08740632, abs=1e-6)


def test_verify_decay_quick(tmp_path):
    out = tmp_path / "o"
    res = run_cli("verify", "--out", str(out),
                  "--set", "run.preset=decoupled",
                  "--set", "verify.eps_ladder=0.2",
                  "--set", "verify.replicas=2000",
                  "--set", "verify.n_nodes=5")
    assert res.returncode == 0, res.stderr
    est = json.loads((out / "decay.json").read_text())
    assert est["tilted"] is True
    assert est["usable"] == [True]
    lines = (out / "decay.csv").read_text().splitlines()
    assert lines[0] == "eps,p_hat,ci_lo,ci_hi,eps_ln_p,reference"
    assert len(lines) == 2


def test_infeasible_event_exits_3_with_diagnostics(tmp_path):
    out = tmp_path / "o"
    res = run_cli("verify", "--out", str(out),
                  "--set", "verify.event=occupation-ball",
                  "--set", "verify.target_mean=6",
                  "--set", "verify.target_variance=0.25",
                  "--set", "verify.radius=0.01",
                  "--set", "verify.n_nodes=5",
                  "--set", "verify.replicas=50",
                  "--set", "verify.tilted=false",
                  "--set", "verify.eps_ladder=0.2")
    assert res.returncode == 3
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["error"] == "NumericalError"
    assert "infeasible" in diag["message"]
    assert diag["config"]["verify"]["radius"] == 0.01


def test_selftest_subset(tmp_path):
    out = tmp_path / "o"
    res = run_cli("selftest", "--out", str(out),
                  "--set", "selftest.criteria=3,5,6")
    assert res.returncode == 0, res.stderr
    assert res.stdout.count("[PASS]") == 3
    rep = json.loads((out / "selftest.json").read_text())
    assert rep["all_passed"] is True
    assert [r["number"] for r in rep["results"]] == [3, 5, 6]
