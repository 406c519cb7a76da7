import json
import subprocess
import sys

import pytest

from backofflab.cli import ConfigError, ExperimentConfig, load_config, run_command


def test_classify_beb(capsys):
    assert run_command(["classify", "--seq", "beb", "--lambda", "0.5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["case"] == "suitable" and out["schema"] == "backofflab.verdict/1"


@pytest.mark.parametrize("process", ["backoff", "jammed", "two-stream"])
def test_simulate_reruns_from_its_output(tmp_path, monkeypatch, capsys, process):
    monkeypatch.setenv("BACKOFFLAB_OUT", str(tmp_path / "a"))
    argv = ["simulate", process, "--seq", "beb", "--lambda", "0.5", "--steps", "300", "--seed", "7", "--J-obs", "6"]
    assert run_command(argv) == 0
    first = tmp_path / "a" / f"{process}-seed7.jsonl"
    assert first.exists() and (tmp_path / "a" / f"{process}-seed7.csv").exists()
    assert load_config(str(first))["steps"] == 300
    assert run_command(["simulate", process, "--config", str(first), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / first.name).read_bytes() == first.read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "backoff", "--seq", "beb", "--lambda", "1.2", "--steps", "10"],
        ["simulate", "backoff", "--seq", "nonsense", "--lambda", "0.5", "--steps", "10"],
        ["simulate", "backoff", "--seq", "beb", "--lambda", "0.5", "--steps", "0"],
        ["blocks", "dump", "--seq", "beb", "--lambda", "0.5"],
        ["blocks", "dump", "--seq", "beb", "--lambda", "0.5", "--override", "bogus=1"],
    ],
    ids=["rate", "sequence", "steps", "infeasible-table", "override"],
)
def test_config_errors_exit_two(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("BACKOFFLAB_OUT", str(tmp_path))
    assert run_command(argv) == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"lambda": 0.5, "colour": "red"})


def test_blocks_dump_csv(capsys):
    argv = ["blocks", "dump", "--seq", "const:1", "--lambda", "0.48", "--override", "I0=1",
            "--override", "tau_init=1", "--override", "C_init=1", "--max-block", "4"]
    assert run_command(argv) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[:3] == ["i,lower,upper,W_i,tau_i", "1,1,1,1,42", "2,2,6,5,258"]


def test_verify_time_reversal(tmp_path, capsys):
    assert run_command(["verify", "time-reversal", "--tau-end", "3", "--max-bin", "2", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("PASS time-reversal")
    assert json.loads((tmp_path / "verify-time-reversal.json").read_text())[0]["passed"]


def test_fill_domination_experiment(tmp_path, capsys):
    cfg = {
        "sequence": "beb",
        "lambda": 0.5,
        "eta": 0.9,
        "nu": 0.5,
        "overrides": {"kappa": 3, "I0": 1, "zeta": 20.0, "tau_init": 1, "C_init": 1},
        "t0": 5,
        "tau_end": 40,
        "seed": 3,
    }
    path = tmp_path / "fill.json"
    path.write_text(json.dumps(cfg))
    assert run_command(["experiment", "fill-domination", "--config", str(path), "--replicas", "500", "--out", str(tmp_path)]) == 0
    result = json.loads((tmp_path / "fill-domination-seed3.json").read_text())
    assert result["rows"] and all(r["mean_pass"] for r in result["rows"])


def test_fill_domination_needs_horizon(tmp_path, capsys):
    path = tmp_path / "fill.json"
    path.write_text(json.dumps({"sequence": "beb", "lambda": 0.5}))
    assert run_command(["experiment", "fill-domination", "--config", str(path)]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "backofflab", "--help"], capture_output=True, text=True, check=True)
    assert "simulate" in out.stdout
