import json
import subprocess
import sys

import pytest
import tomli

from moma.cli import EXIT_CONFIG, EXIT_OK, main

QUICK = ["--set", "run.max_steps=2", "--set", "run.epochs=2", "--set", "run.warmup_epochs=0",
         "--set", "run.batch_size=8", "--set", "data.n_train=16", "--set", "data.n_test=16"]
RUN_FILES = {"config.resolved.toml", "metrics.csv", "final.ckpt", "DONE"}


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def files(path):
    return {p.name for p in path.iterdir()}


def test_pipeline_writes_run_directories(tmp_path, capsys):
    code, out, _ = run(capsys, "pretrain-moco", "--out", str(tmp_path / "moco"), *QUICK)
    assert code == EXIT_OK and json.loads(out)["steps"] == 2
    code, _, _ = run(capsys, "pretrain-mae", "--out", str(tmp_path / "mae"), *QUICK)
    assert code == EXIT_OK
    code, out, _ = run(capsys, "distill", "--out", str(tmp_path / "d"), "--seed", "3", *QUICK,
                       "--set", "distill.mode=multi",
                       "--set", f"teacher.mae_checkpoint={tmp_path / 'mae' / 'final.ckpt'}",
                       "--set", f"teacher.moco_checkpoint={tmp_path / 'moco' / 'final.ckpt'}")
    assert code == EXIT_OK
    student = json.loads(out)["checkpoint"]
    for kind in ("finetune", "probe"):
        code, out, _ = run(capsys, kind, "--out", str(tmp_path / kind), *QUICK,
                           "--set", f"finetune.checkpoint={student}")
        assert code == EXIT_OK and 0.0 <= json.loads(out)["accuracy"] <= 1.0
    code, out, _ = run(capsys, "eval", "--out", str(tmp_path / "eval"), *QUICK,
                       "--set", f"finetune.checkpoint={tmp_path / 'probe' / 'final.ckpt'}")
    assert code == EXIT_OK
    for name in ("moco", "mae", "d", "finetune", "probe"):
        assert RUN_FILES <= files(tmp_path / name), name
    assert RUN_FILES - {"metrics.csv"} <= files(tmp_path / "eval")  # evaluation has no steps to log
    snap = tomli.loads((tmp_path / "d" / "config.resolved.toml").read_text())
    assert snap["run"]["seed"] == 3 and snap["distill"]["mode"] == "multi"


def test_override_recorded(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[teacher]\ninit = "random"\n')
    code, _, _ = run(capsys, "distill", "--config", str(cfg), "--out", str(tmp_path / "o"), *QUICK,
                     "--set", "distill.mask_ratio=0.9")
    assert code == EXIT_OK
    assert tomli.loads((tmp_path / "o" / "config.resolved.toml").read_text())["distill"]["mask_ratio"] == 0.9


def test_same_argv_same_snapshot(tmp_path, capsys):
    argv = ["distill", "--set", "teacher.init=random", *QUICK]
    run(capsys, *argv, "--out", str(tmp_path / "a"))
    run(capsys, *argv, "--out", str(tmp_path / "b"))
    a = (tmp_path / "a" / "config.resolved.toml").read_bytes()
    assert a == (tmp_path / "b" / "config.resolved.toml").read_bytes()


@pytest.mark.parametrize("argv", [
    ["distill", "--set", "distill.mask_ratio=1.5"],
    ["distill", "--set", "distill.bogus=1"],
    ["distill", "--set", "novalue"],
    ["distill", "--config", "/nonexistent.toml"],
    ["distill"],  # teacher checkpoints missing
    ["finetune", "--set", "finetune.checkpoint=/nonexistent.ckpt"],
    ["nonsense"],
])
def test_config_errors(argv, tmp_path, capsys):
    code, _, err = run(capsys, *argv, "--out", str(tmp_path / "x")) if argv[0] != "nonsense" else run(capsys, *argv)
    assert code == EXIT_CONFIG
    lines = err.strip().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["error"] == "config"


def test_output_root_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MOMA_OUTPUT_ROOT", str(tmp_path))
    code, out, _ = run(capsys, "probe", "--set", "finetune.checkpoint=random", *QUICK)
    assert code == EXIT_OK
    assert RUN_FILES <= files(tmp_path / "probe" / "seed0")


def test_grad_check_subcommand(tmp_path, capsys):
    code, out, _ = run(capsys, "grad-check", "--seeds", "1", "--out", str(tmp_path / "g"))
    assert code == EXIT_OK and json.loads(out)["failed"] == []
    assert (tmp_path / "g" / "grad_check.csv").exists()


def test_console_script_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "moma.cli", "distill", "--set", "distill.mask_ratio=2"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG and json.loads(proc.stderr)["type"] == "ConfigError"
