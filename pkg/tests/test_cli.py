from __future__ import annotations

import json
import shutil
import subprocess
import sys

import pytest

from cosim.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from conftest import DATA, FIXTURES


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("campaign")
    code = main(["run", str(DATA / "experiment.json"), "--plan", str(DATA / "plan.json"), "-o", str(out)])
    assert code == EXIT_OK
    return out


def test_validate(capsys):
    assert main(["validate", str(DATA / "test_spec.json")]) == EXIT_OK
    assert main(["validate", str(FIXTURES / "invalid" / "tc_oui_outside_sut.json")]) == EXIT_FAIL
    assert capsys.readouterr().out.startswith("ERROR tx_grid: object under investigation")


def test_validate_bad_json(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["validate", str(bad)]) == EXIT_FAIL


def test_compile(tmp_path, capsys):
    out = tmp_path / "exp.json"
    assert main(["compile", str(DATA / "test_spec.json"), "--ri", str(DATA / "ri_sc.json"), "-o", str(out)]) == EXIT_OK
    assert json.loads(out.read_text()) == json.loads((DATA / "experiment.json").read_text())
    assert "6 federates, 11 connections" in capsys.readouterr().out
    code = main(["compile", str(DATA / "test_spec.json"), "--ri", str(DATA / "ri_sc_nocomm.json"), "-o", str(out)])
    assert code == EXIT_FAIL


def test_run_and_assess(run_dir, capsys):
    assert (run_dir / "summary.csv").exists()
    assert main(["assess", str(run_dir)]) == EXIT_OK
    assert main(["assess", str(run_dir), "--set", "qv.tol=0.001"]) == EXIT_FAIL
    assert main(["assess", str(run_dir), "--set", "qv.bogus=1"]) == EXIT_USAGE
    assert main(["assess", str(run_dir), "--set", "novalue"]) == EXIT_USAGE


def test_run_errors(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"sweep": [{"x": "nowhere", "y": 0.3}]}))
    args = ["run", str(DATA / "experiment.json"), "-o", str(tmp_path / "o")]
    assert main(args + ["--plan", str(plan)]) == EXIT_ERROR
    plan.write_text(json.dumps({"sweep": []}))
    assert main(args + ["--plan", str(plan)]) == EXIT_FAIL
    assert main(args + ["--plan", str(tmp_path / "missing.json")]) == EXIT_USAGE
    assert main(args + ["--plan", str(DATA / "plan.json"), "--seed", "-1"]) == EXIT_USAGE
    assert main(args + ["--plan", str(DATA / "plan.json"), "--workers", "0"]) == EXIT_USAGE
    invalid = FIXTURES / "invalid" / "ex_unmapped_federate.json"
    assert main(["run", str(invalid), "--plan", str(DATA / "plan.json"), "-o", str(tmp_path / "o")]) == EXIT_FAIL


def test_workflow(tmp_path, capsys):
    state = tmp_path / "wf.json"
    assert main(["workflow", str(state)]) == EXIT_OK
    for _ in range(5):
        assert main(["workflow", str(state), "proceed"]) == EXIT_OK
    assert "PreAssessment" in capsys.readouterr().out
    assert main(["workflow", str(state), "loop_back"]) == EXIT_OK
    assert json.loads(state.read_text())["stage"] == "TestSpec"
    assert main(["workflow", str(state), "loop_back"]) == EXIT_FAIL
    assert main(["workflow", str(state), "reset"]) == EXIT_OK
    assert json.loads(state.read_text())["stage"] == "TestCase"


def test_usage_errors(monkeypatch):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["validate", "/no/such/file.json"]) == EXIT_USAGE
    monkeypatch.setenv("COSIM_LOG", "loud")
    assert main(["validate", str(DATA / "test_spec.json")]) == EXIT_USAGE


def test_installed_script():
    exe = shutil.which("cosim")
    cmd = [exe] if exe else [sys.executable, "-m", "cosim.cli"]
    proc = subprocess.run(cmd + ["validate", str(DATA / "ts_sc.json")], capture_output=True, text=True)
    assert proc.returncode == 0
    proc = subprocess.run(cmd + ["--version"], capture_output=True, text=True)
    assert proc.stdout.startswith("cosim ")
