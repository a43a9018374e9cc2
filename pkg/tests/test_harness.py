import json
import os
import subprocess
import sys

import numpy as np
import pytest

from stirpam import harness
from stirpam.golden import RENORM_GOLDEN


def test_config_validation_lists_every_problem():
    cfg = harness.ExperimentConfig(kind="nope", d=0, levels=(1,), rho=1.5,
                                   horizon=-1.0, replicas=0, dt=0.0, points=0,
                                   threads=0, deltas=(2.0,))
    problems = cfg.validate()
    assert len(problems) >= 9
    joined = " ".join(problems)
    for token in ("kind", "d must", "levels", "rho", "horizon", "replicas",
                  "dt", "points", "threads", "delta"):
        assert token in joined


def test_config_hash_stable():
    a = harness.ExperimentConfig(kind="renorm", seed=3)
    b = harness.ExperimentConfig(kind="renorm", seed=3)
    c = harness.ExperimentConfig(kind="renorm", seed=4)
    assert a.hash() == b.hash()
    assert a.hash() != c.hash()


def test_golden_table_nonempty_and_reproduced():
    assert RENORM_GOLDEN
    ok, detail = harness._check_golden()
    assert ok, detail


def test_golden_tamper_is_named_failure(monkeypatch):
    tampered = {k: dict(v) for k, v in RENORM_GOLDEN.items()}
    key = next(iter(tampered))
    tampered[key]["c_n"] *= 1.001
    monkeypatch.setattr(harness, "RENORM_GOLDEN", tampered)
    ok, detail = harness._check_golden()
    assert not ok
    assert "mismatch" in detail and "c_n" in detail


def test_verify_quick_passes(capsys):
    report = harness.verify_all("quick")
    assert report["all_pass"], {k: v for k, v in report["checks"].items() if not v["pass"]}
    assert set(report["checks"]) == {name for name, _ in harness.QUICK_CHECKS}


def test_cumulants_pipeline_and_determinism(tmp_path):
    cfg = harness.ExperimentConfig(kind="cumulants", d=1, sites=4, rho=0.5,
                                   points=2, seed=12, out_dir=str(tmp_path / "a"))
    assert harness.run(cfg) == 0
    cfg2 = harness.ExperimentConfig(kind="cumulants", d=1, sites=4, rho=0.5,
                                    points=2, seed=12, out_dir=str(tmp_path / "b"))
    assert harness.run(cfg2) == 0
    a = (tmp_path / "a" / "cumulants_d1_s4_k2.csv").read_bytes()
    b = (tmp_path / "b" / "cumulants_d1_s4_k2.csv").read_bytes()
    assert a == b
    status = json.loads((tmp_path / "a" / "cumulants_status.json").read_text())
    assert status["pass"] is True


def test_ssep_pipeline_writes_stream(tmp_path):
    cfg = harness.ExperimentConfig(kind="ssep", d=1, levels=(2,), horizon=0.2,
                                   seed=5, out_dir=str(tmp_path))
    assert harness.run(cfg) == 0
    assert (tmp_path / "ssep_d1_N2.events").exists()
    header = (tmp_path / "ssep_d1_N2.csv").read_text().splitlines()
    assert header[0].startswith("# config_hash:")
    assert header[1].startswith("# version:")
    assert header[2].startswith("# master_seed:")


def test_renorm_pipeline_csv_schema(tmp_path):
    cfg = harness.ExperimentConfig(kind="renorm", d=1, levels=(2,), rho=0.5,
                                   replicas=500, seed=2, out_dir=str(tmp_path))
    assert harness.run(cfg) == 0
    lines = (tmp_path / "renorm_d1_rho0.5.csv").read_text().splitlines()
    cols = lines[3].split(",")
    assert cols == ["d", "N", "rho", "c_N", "c_N1", "c_N21", "c_N21_ci", "c_N22",
                    "c_N23", "alpha_N", "beta_N", "gamma_N", "C_N"]


def test_invalid_config_exit_code():
    cfg = harness.ExperimentConfig(kind="bogus")
    assert harness.run(cfg) == 2


def test_cli_usage_without_command():
    proc = subprocess.run([sys.executable, "-m", "stirpam.harness"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage" in (proc.stdout + proc.stderr).lower()


def test_cli_cumulants_subcommand(tmp_path):
    env = dict(os.environ, STIRPAM_OUT=str(tmp_path), PYTHONPATH="src")
    proc = subprocess.run(
        [sys.executable, "-m", "stirpam.harness", "cumulants", "--exact",
         "--sites", "4", "--d", "1", "--rho", "0.5", "--points", "2", "--seed", "1"],
        capture_output=True, text=True, env=env, cwd=os.path.dirname(os.path.dirname(__file__)))
    assert proc.returncode == 0, proc.stderr
    outputs = proc.stdout.strip().splitlines()
    assert any(p.endswith(".csv") for p in outputs)
    status = json.loads((tmp_path / "cumulants_status.json").read_text())
    assert status["pass"] is True


def test_env_var_output_override(monkeypatch, tmp_path):
    monkeypatch.setenv("STIRPAM_OUT", str(tmp_path / "envout"))
    parser = harness.build_parser()
    args = parser.parse_args(["ssep", "--N", "2", "--T", "0.05"])
    cfg = harness.config_from_args(args)
    assert cfg.out_dir == str(tmp_path / "envout")


def test_write_csv_float_format(tmp_path):
    cfg = harness.ExperimentConfig(kind="ssep")
    path = tmp_path / "x.csv"
    harness.write_csv(path, ["a"], [(1.0 / 3.0,)], cfg)
    body = path.read_text().splitlines()[-1]
    assert body == "%.17g" % (1.0 / 3.0)
