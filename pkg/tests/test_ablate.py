
import numpy as np

from conftest import quick_config
from moma import ablate, train
from moma.ablate import RANDOM_MODE, Cell, cell_configs, grid_cells, read_summary, run_ablation, stage_config
from moma.data import CIFAR10_DIR_ENV, CIFAR_RECORD_BYTES

def grid(**ablate_values):
    cfg = quick_config("ablate", steps=2, batch=8, n_train=16)
    cfg["run"].update(epochs=10, warmup_epochs=2, max_steps=2)
    cfg["ablate"].update(sizes=["micro:micro"], modes=["moco_to_mae"], mask_ratios=[0.9], pretrain_epochs=2,
                         distill_epochs=2, probe_epochs=2, random_baseline=False)
    cfg["ablate"].update(ablate_values)
    return cfg

def test_cells_cover_grid():
    cfg = grid(modes=["moco_to_mae", "multi"], mask_ratios=[0.75, 0.9], random_baseline=True)
    cells = grid_cells(cfg)
    assert len(cells) == 5
    assert cells[-1] == Cell(RANDOM_MODE, 0.0, "none", "micro")
    assert len({c.name for c in cells}) == 5

def test_stage_config_keeps_warmup_fraction():
    base = grid()
    probe = stage_config(base, "probe", 20, 0.0)
    assert probe["run"]["warmup_epochs"] == 4 and probe["run"]["kind"] == "probe"
    assert probe["optim"]["lr"] == 1.5e-3
    assert stage_config(base, "distill", 20, 2e-3)["optim"]["lr"] == 2e-3

def test_two_ratio_grid(tmp_path):
    cfg = grid(mask_ratios=[0.75, 0.9])
    rows = read_summary(run_ablation(cfg, tmp_path))
    assert [r["mask_ratio"] for r in rows] == ["0.75", "0.9"]
    assert all(r["status"] == "ok" and 0 <= float(r["probe_acc"]) <= 1 for r in rows)
    assert {p.name for p in tmp_path.iterdir()} >= {"summary.csv", "timings.csv", "DONE", "teachers"}

def test_single_cell_matches_manual_pipeline(tmp_path):
    cfg = grid()
    rows = read_summary(run_ablation(cfg, tmp_path / "grid"))
    teachers = ablate.pretrain_teachers(cfg, tmp_path / "grid")  # cached, not retrained
    distill_cfg, probe_cfg = cell_configs(cfg, grid_cells(cfg)[0], teachers)
    d = train.run_distill(distill_cfg, tmp_path / "d")
    probe_cfg["finetune"]["checkpoint"] = str(d.checkpoint)
    p = train.run_linear_probe(probe_cfg, tmp_path / "p")
    assert float(rows[0]["probe_acc"]) == p.accuracy
    assert float(rows[0]["final_loss"]) == d.final_loss

def test_rerun_identical_summary(tmp_path):
    cfg = grid(random_baseline=True)
    a = run_ablation(cfg, tmp_path / "a").read_bytes()
    b = run_ablation(cfg, tmp_path / "b").read_bytes()
    assert a == b

def test_failed_cell_recorded(tmp_path, monkeypatch):
    cfg = grid(modes=["moco_to_mae", "mae_to_moco"])
    real = train.run_distill

    def flaky(c, out, **kw):
        if c["distill"]["mode"] == "moco_to_mae":
            raise RuntimeError("boom")
        return real(c, out, **kw)

    monkeypatch.setattr(train, "run_distill", flaky)
    rows = read_summary(run_ablation(cfg, tmp_path))
    assert [r["status"] for r in rows] == ["failed", "ok"]
    assert rows[0]["error"] == "RuntimeError: boom" and rows[0]["probe_acc"] == ""
    assert (tmp_path / "DONE").read_text().strip() == '{"cells": 2, "failed": 1}'

def test_parallel_matches_serial(tmp_path):
    cfg = grid(mask_ratios=[0.5, 0.9])
    serial = run_ablation(cfg, tmp_path / "s", jobs=1).read_bytes()
    parallel = run_ablation(cfg, tmp_path / "p", jobs=2).read_bytes()
    assert serial == parallel


def test_grid_on_cifar_layout(tmp_path, monkeypatch):
    # random bytes in the CIFAR-10 binary layout exercise the same path as the real dataset
    rng = np.random.default_rng(0)
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    for name, n in [(f"data_batch_{i}.bin", 8) for i in range(1, 6)] + [("test_batch.bin", 16)]:
        rec = rng.integers(0, 256, size=(n, CIFAR_RECORD_BYTES), dtype=np.uint8)
        rec[:, 0] = rng.integers(0, 10, size=n)
        rec.tofile(root / name)
    monkeypatch.setenv(CIFAR10_DIR_ENV, str(root))
    cfg = grid(mask_ratios=[0.5, 0.9], random_baseline=True)
    cfg["data"]["kind"] = "cifar10"
    rows = read_summary(run_ablation(cfg, tmp_path / "out"))
    assert [r["status"] for r in rows] == ["ok"] * 3
