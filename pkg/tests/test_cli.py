import json
import subprocess
import sys

import pytest

from promptmix.cli import main


@pytest.fixture
def toy(tmp_path, capsys):
    assert main(["init-toy", str(tmp_path / "toy"), "--max-steps", "3"]) == 0
    return str(capsys.readouterr().out.strip())


def test_run_all_prints_table(toy, capsys):
    assert main(["run-all", "--config", toy]) == 0
    out = capsys.readouterr().out
    for name in ("distinct@1", "distinct@2", "distinct@3", "correctness", "student_exact_match"):
        assert name in out


def test_stage_commands_in_order(toy, capsys):
    for cmd in ("tune", "generate", "denoise", "train-student", "evaluate"):
        assert main([cmd, "--config", toy]) == 0, cmd
    out = capsys.readouterr().out
    assert "60 candidates" in out and "48 synthesized examples" in out


def test_stage_order_exit_code(toy, capsys):
    assert main(["generate", "--config", toy]) == 3
    assert "tune" in capsys.readouterr().err


def test_validation_exit_codes(toy, tmp_path, capsys):
    assert main(["tune", "--config", toy, "--set", "tune.bogus=1"]) == 2
    assert main(["tune", "--config", str(tmp_path / "missing.toml")]) == 2
    assert main(["tune", "--config", toy, "--set", "data.train=nowhere.jsonl"]) == 2


def test_corrupt_bank_exit_code(toy, tmp_path, capsys):
    bad = tmp_path / "bad.spb"
    bad.write_bytes(b"junk")
    assert main(["generate", "--config", toy, "--bank", str(bad)]) == 2
    assert "validation error" in capsys.readouterr().err


def test_numeric_exit_code(toy, monkeypatch):
    from promptmix import pipeline
    from promptmix.errors import NumericError

    def boom(ctx, backend=None):
        raise NumericError("non-finite loss")
    monkeypatch.setattr(pipeline, "cmd_tune", boom)
    assert main(["tune", "--config", toy]) == 4


def test_flags_override_config(toy, tmp_path, capsys):
    run_dir = tmp_path / "elsewhere"
    assert main(["run-all", "--config", toy, "--run-dir", str(run_dir), "--seed", "5", "--no-syn"]) == 0
    snap = json.loads((run_dir / "config.json").read_text())
    assert snap["seed"] == 5 and snap["ablation"]["no_syn"] is True
    assert "student_exact_match" in capsys.readouterr().out


def test_ablation_flags_recorded(toy, tmp_path):
    flags = ["--no-denoise", "--no-instruction", "--no-metadata", "--no-attribute-prompt", "--no-exemplars"]
    assert main(["tune", "--config", toy, "--run-dir", str(tmp_path / "r"), *flags]) == 0
    snap = json.loads((tmp_path / "r" / "config.json").read_text())
    assert all(snap["ablation"][f[2:].replace("-", "_")] for f in flags)


def test_console_script_entry_point(toy):
    out = subprocess.run([sys.executable, "-m", "promptmix.cli", "evaluate", "--config", toy],
                         capture_output=True, text=True)
    assert out.returncode == 3
