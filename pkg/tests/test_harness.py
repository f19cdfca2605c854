"""Tests for configuration, the command-line entry point and reproducibility."""

from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from roughctl import harness as hs
from roughctl.errors import InvalidArgumentError

SMALL_LQC = dict(fixture="lqc-additive", grid_n=32, mesh_nodes=61, controls=11, n_paths=70,
                 riccati_steps=512, seed=5)


def write_config(tmp_path, name="config.json", **data):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def run_cli(tmp_path, command, out, **config):
    argv = [command, "--out", str(tmp_path / out)]
    if config:
        argv += ["--config", write_config(tmp_path, f"{out}.json", **config)]
    return hs.main(argv)


# --- configuration -----------------------------------------------------------

def test_defaults_are_valid():
    cfg = hs.ExperimentConfig()
    assert cfg.fixture == "lqc-additive" and cfg.n_paths == 2000


@pytest.mark.parametrize("bad", [
    {"n_paths": 0}, {"grid_n": -1}, {"seed": -3}, {"fixture": "nope"}, {"penalty": "nope"},
    {"control_range": [1.0, -1.0]}, {"workers": 0}, {"mesh_nodes": 2.5}, {"n_paths": True},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(InvalidArgumentError):
        hs.ExperimentConfig.from_dict(bad)


def test_unknown_keys_rejected():
    with pytest.raises(InvalidArgumentError):
        hs.ExperimentConfig.from_dict({"n_path": 10})


def test_from_file_errors(tmp_path):
    with pytest.raises(InvalidArgumentError):
        hs.ExperimentConfig.from_file(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(InvalidArgumentError):
        hs.ExperimentConfig.from_file(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(InvalidArgumentError):
        hs.ExperimentConfig.from_file(bad)


def test_config_round_trips_through_record(tmp_path):
    cfg = hs.ExperimentConfig(fixture="sine-drift", grid_n=64, seed=11, workers=3, out=str(tmp_path / "o"),
                              levels=[4, 8], params={"y0": 0.2})
    hs.RunRecord("x", cfg.to_dict()).write(cfg.out_dir)
    again = hs.RunRecord.config_from_files(cfg.out_dir)
    assert again == cfg


def test_flags_override_config(tmp_path):
    path = write_config(tmp_path, seed=1, n_paths=10, grid_n=16)
    args = hs.build_parser().parse_args(["bound", "--config", path, "--seed", "9", "--paths", "20",
                                         "--workers", "2"])
    cfg = hs.load_config(args)
    assert (cfg.seed, cfg.n_paths, cfg.grid_n, cfg.workers) == (9, 20, 16, 2)


def test_command_defaults_apply():
    cfg = hs.load_config(hs.build_parser().parse_args(["hjb"]))
    assert cfg.fixture == "translation" and cfg.mesh_nodes == 1201


# --- exit codes --------------------------------------------------------------

def test_config_error_exit_code(tmp_path, capsys):
    assert run_cli(tmp_path, "lqc-verify", "o", n_paths=0) == hs.EXIT_CONFIG
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "config"
    assert hs.main(["bound", "--paths", "0", "--out", str(tmp_path / "p")]) == hs.EXIT_CONFIG
    assert run_cli(tmp_path, "lqc-verify", "q", fixture="translation") == hs.EXIT_CONFIG


def test_numerical_failure_exit_code(tmp_path, capsys):
    # a positive terminal weight makes the Riccati solution blow up before t = 0
    code = run_cli(tmp_path, "lqc-verify", "o", **{**SMALL_LQC, "params": {"M": 0.0, "Q": 0.0, "G": 2.0}})
    assert code == hs.EXIT_NUMERIC
    assert json.loads(capsys.readouterr().err.strip())["error"] == "numerical"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "roughctl", "sample-path", "--grid", "8", "--out",
                           str(tmp_path / "sp")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "sp" / "path.csv").exists()
    proc = subprocess.run([sys.executable, "-m", "roughctl", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2


# --- commands ----------------------------------------------------------------

def test_lqc_verify_writes_reports(tmp_path):
    code = run_cli(tmp_path, "lqc-verify", "o", **SMALL_LQC)
    assert code in (hs.EXIT_PASS, hs.EXIT_FAIL)
    rec = json.loads((tmp_path / "o" / "record.json").read_text())
    assert rec["passed"] == (code == hs.EXIT_PASS)
    assert set(rec["checks"]) == {"lower_matches_value", "upper_matches_value", "gap_small", "weak_duality"}
    header, row = (tmp_path / "o" / "report.csv").read_text().splitlines()
    assert header.split(",")[0] == "fixture" and row.split(",")[0] == "lqc-additive"
    assert json.loads((tmp_path / "o" / "report.json").read_text())["lower"]["n_paths"] == 70


def test_zero_penalty_checks_dominance(tmp_path):
    run_cli(tmp_path, "lqc-verify", "o", **{**SMALL_LQC, "penalty": "zero"})
    rec = json.loads((tmp_path / "o" / "record.json").read_text())
    assert "upper_dominates_value" in rec["checks"] and "gap_small" not in rec["checks"]


def test_bound_has_no_checks(tmp_path):
    cfg = {**SMALL_LQC, "fixture": "lqc-multiplicative", "penalty": "db", "n_paths": 8}
    assert run_cli(tmp_path, "bound", "o", **cfg) == hs.EXIT_PASS
    rec = json.loads((tmp_path / "o" / "record.json").read_text())
    assert rec["checks"] == {} and rec["results"]["upper"]["n_paths"] == 8


def test_hjb_zero_driver_matches_characteristics(tmp_path):
    code = run_cli(tmp_path, "hjb", "o", fixture="translation", mesh_nodes=241, controls=11, grid_n=16,
                   levels=[4, 16], params={"zero_driver": True})
    rec = json.loads((tmp_path / "o" / "record.json").read_text())
    assert rec["results"]["closed_form_rel_error"][-1] <= 0.02
    assert code == hs.EXIT_PASS


def test_hjb_rejects_non_nested_levels(tmp_path):
    assert run_cli(tmp_path, "hjb", "o", fixture="translation", mesh_nodes=41, grid_n=16,
                   levels=[3, 16]) == hs.EXIT_CONFIG


def test_pmp_command(tmp_path):
    code = run_cli(tmp_path, "pmp", "o", grid_n=128, controls=11, spike_exponents=[3, 5, 7])
    rec = json.loads((tmp_path / "o" / "record.json").read_text())
    assert rec["checks"]["residual_small"] and rec["checks"]["lqc_linearization_exact"]
    assert code == hs.EXIT_PASS
    for name in ("residual.csv", "spike_lqc.csv", "spike_nonlinear.csv"):
        assert (tmp_path / "o" / name).exists()


def test_wong_zakai_command(tmp_path):
    code = run_cli(tmp_path, "wong-zakai", "o", fixture="sine-drift", levels=[16, 64, 256, 1024], samples=16)
    rec = json.loads((tmp_path / "o" / "record.json").read_text())
    assert rec["checks"]["differences_decrease"]
    assert code in (hs.EXIT_PASS, hs.EXIT_FAIL)
    assert len(rec["results"]["differences"]) == 3


def test_sample_path_is_reproducible(tmp_path):
    for out in ("a", "b"):
        assert hs.main(["sample-path", "--grid", "16", "--seed", "4", "--out", str(tmp_path / out)]) == 0
    assert (tmp_path / "a" / "path.csv").read_bytes() == (tmp_path / "b" / "path.csv").read_bytes()


# --- reproducibility ---------------------------------------------------------

def outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.name != "run.json"}


def test_outputs_identical_across_runs_and_workers(tmp_path):
    cfg = {**SMALL_LQC, "n_paths": 140}
    for out, workers in (("a", 1), ("b", 1), ("c", 4)):
        run_cli(tmp_path, "lqc-verify", out, **cfg, workers=workers)
    a, b, c = (outputs(tmp_path / k) for k in "abc")
    assert a == b == c
    assert set(a) == {"record.json", "report.csv", "report.json"}
    run = json.loads((tmp_path / "c" / "run.json").read_text())
    assert run["workers"] == 4 and "lower" in run["timings"]


def test_record_floats_are_plain_json(tmp_path):
    run_cli(tmp_path, "lqc-verify", "o", **{**SMALL_LQC, "n_paths": 10})
    rec = json.loads((tmp_path / "o" / "record.json").read_text())
    assert isinstance(rec["results"]["oracle_value"], float)
    assert np.isfinite(rec["results"]["gap"])
