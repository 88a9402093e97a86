from __future__ import annotations

import fcntl
import json

import pytest

from analog_vmm.cli import EXIT_BUSY, EXIT_CONTRACT, EXIT_INPUT, EXIT_OK, EXIT_USAGE, run_command


def test_usage_errors(tmp_path):
    assert run_command([]) == EXIT_USAGE
    assert run_command(["cost", "--model", "vgg", "--out", str(tmp_path)]) == EXIT_USAGE
    assert run_command(["--help"]) == EXIT_OK


def test_missing_config_is_an_input_error(tmp_path):
    assert run_command(["cost", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path)]) == EXIT_INPUT


def test_bad_config_is_an_input_error(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[cost]\nbogus = 1\n")
    assert run_command(["cost", "--config", str(path), "--out", str(tmp_path)]) == EXIT_INPUT


def test_contract_violation_exit(tmp_path):
    assert run_command(["cost", "--batch", "0", "--out", str(tmp_path), "--quiet"]) == EXIT_CONTRACT


def test_busy_output_directory(tmp_path):
    with open(tmp_path / ".lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        assert run_command(["cost", "--out", str(tmp_path), "--quiet"]) == EXIT_BUSY
    assert run_command(["cost", "--out", str(tmp_path), "--quiet"]) == EXIT_OK


@pytest.mark.parametrize("model, runtime, energy", [("single", 5.0, 1.5), ("dense", 10.0, 3.0), ("conv", 40.0, 12.0)])
def test_cost_outputs(tmp_path, capsys, model, runtime, energy):
    assert run_command(["cost", "--model", model, "--out", str(tmp_path)]) == EXIT_OK
    data = json.loads((tmp_path / f"cost_{model}.json").read_text())
    assert data["runtime_ms"] == runtime and data["energy_mj"] == pytest.approx(energy)
    assert f"{runtime:g} ms" in capsys.readouterr().out


def test_compile_writes_plan(tmp_path):
    assert run_command(["compile", "--model", "conv", "--out", str(tmp_path), "--quiet"]) == EXIT_OK
    plan = json.loads((tmp_path / "plan_conv.json").read_text())
    assert plan["runs"] == 8


def test_missing_dataset_is_an_input_error(tmp_path, monkeypatch):
    monkeypatch.setenv("ANALOG_VMM_MNIST", str(tmp_path / "nowhere"))
    args = ["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o"), "--quiet"]
    assert run_command(args) == EXIT_INPUT


def test_characterization_csv_is_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["characterize", "--uncalibrated", "--seed", "5", "--levels", "0,7", "--repeats", "3",
                "--out", str(out), "--quiet"]
        assert run_command(args) == EXIT_OK
        outs.append((out / "characterization.csv").read_bytes())
    assert outs[0] == outs[1]
