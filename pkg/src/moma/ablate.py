"""Distillation ablation grid: modes x mask ratios x (teacher, student) sizes.

Teachers are pre-trained once per size and shared by every cell. Each cell
distils a student and linear-probes it. ``summary.csv`` holds one row per
cell and is deterministic for a fixed seed; wall-clock times go to
``timings.csv`` so reruns can be compared byte for byte.
"""
from __future__ import annotations

import copy
import csv
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import train
from .config import default_config, write_snapshot

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("cell", "mode", "mask_ratio", "teacher", "student", "probe_acc", "distill_steps", "probe_steps",
                   "final_loss", "status", "error")
TIMING_COLUMNS = ("cell", "wall_time")
RANDOM_MODE = "random_init"


@dataclass(frozen=True)
class Cell:
    mode: str
    mask_ratio: float
    teacher: str
    student: str

    @property
    def name(self) -> str:
        return f"{self.mode}_r{self.mask_ratio:g}_{self.teacher}-{self.student}"


def grid_cells(cfg: dict) -> list[Cell]:
    ab = cfg["ablate"]
    cells = []
    for size in ab["sizes"]:
        teacher, student = size.split(":")
        for mode in ab["modes"]:
            for ratio in ab["mask_ratios"]:
                cells.append(Cell(mode, float(ratio), teacher, student))
    if ab["random_baseline"]:
        for student in dict.fromkeys(s.split(":")[1] for s in ab["sizes"]):
            cells.append(Cell(RANDOM_MODE, 0.0, "none", student))
    return cells


def stage_config(base: dict, kind: str, epochs: int, lr: float) -> dict:
    """``base`` re-targeted at one pipeline stage; warmup keeps the base warmup/epochs proportion."""
    cfg = copy.deepcopy(base)
    defaults = default_config(kind)
    cfg["run"]["kind"] = kind
    cfg["run"]["epochs"] = epochs
    fraction = base["run"]["warmup_epochs"] / base["run"]["epochs"]
    cfg["run"]["warmup_epochs"] = min(int(round(epochs * fraction)), epochs - 1)
    if kind in ("probe", "finetune"):
        for key in ("lr", "beta1", "beta2"):
            cfg["optim"][key] = defaults["optim"][key]
    if lr > 0:
        cfg["optim"]["lr"] = lr
    return cfg


def pretrain_config(base: dict, kind: str, teacher: str) -> dict:
    ab = base["ablate"]
    cfg = stage_config(base, kind, ab["pretrain_epochs"], ab["pretrain_lr"])
    cfg["model"].update(preset=teacher, init="random", use_class_token=False)
    return cfg


def cell_configs(base: dict, cell: Cell, teachers: dict[str, dict[str, Path]]) -> tuple[dict | None, dict]:
    """(distill config or None for the random baseline, probe config without its checkpoint)."""
    ab = base["ablate"]
    probe = stage_config(base, "probe", ab["probe_epochs"], ab["probe_lr"])
    probe["model"]["preset"] = cell.student
    if cell.mode == RANDOM_MODE:
        probe["finetune"]["checkpoint"] = "random"
        return None, probe
    distill = stage_config(base, "distill", ab["distill_epochs"], ab["distill_lr"])
    distill["model"].update(preset=cell.student, init="random")
    distill["teacher"].update(preset=cell.teacher, init="checkpoint",
                              mae_checkpoint=str(teachers[cell.teacher]["mae"]),
                              moco_checkpoint=str(teachers[cell.teacher]["moco"]))
    distill["distill"].update(mode=cell.mode, mask_ratio=cell.mask_ratio)
    return distill, probe


def pretrain_teachers(cfg: dict, out: Path) -> dict[str, dict[str, Path]]:
    teachers: dict[str, dict[str, Path]] = {}
    needed = dict.fromkeys(s.split(":")[0] for s in cfg["ablate"]["sizes"])
    for teacher in needed:
        paths = {}
        for name, kind, runner in (("moco", "pretrain-moco", train.run_pretrain_moco),
                                   ("mae", "pretrain-mae", train.run_pretrain_mae)):
            run_dir = out / "teachers" / f"{teacher}_{name}"
            final = run_dir / "final.ckpt"
            if not ((run_dir / "DONE").exists() and final.exists()):
                runner(pretrain_config(cfg, kind, teacher), run_dir)
            paths[name] = final
        teachers[teacher] = paths
    return teachers


def run_cell(base: dict, cell: Cell, teachers: dict, out: Path) -> tuple[dict, float]:
    started = time.perf_counter()
    row = {"cell": cell.name, "mode": cell.mode, "mask_ratio": cell.mask_ratio, "teacher": cell.teacher,
           "student": cell.student, "probe_acc": "", "distill_steps": 0, "probe_steps": 0, "final_loss": "",
           "status": "ok", "error": ""}
    try:
        distill_cfg, probe_cfg = cell_configs(base, cell, teachers)
        if distill_cfg is not None:
            d = train.run_distill(distill_cfg, out / cell.name / "distill")
            row["distill_steps"], row["final_loss"] = d.steps, d.final_loss
            probe_cfg["finetune"]["checkpoint"] = str(d.checkpoint)
        p = train.run_linear_probe(probe_cfg, out / cell.name / "probe")
        row["probe_acc"], row["probe_steps"] = p.accuracy, p.steps
    except Exception as exc:  # a failed cell must not stop the grid
        log.error("cell %s failed: %s\n%s", cell.name, exc, traceback.format_exc())
        row["status"], row["error"] = "failed", f"{type(exc).__name__}: {exc}".replace("\n", " ")
    return row, time.perf_counter() - started


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def run_ablation(cfg: dict, out_dir, jobs: int | None = None) -> Path:
    """Run every cell, write ``summary.csv`` and ``timings.csv``; returns the summary path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "DONE").unlink(missing_ok=True)
    write_snapshot(cfg, out / "config.resolved.toml")
    jobs = jobs or cfg["ablate"]["jobs"]
    teachers = pretrain_teachers(cfg, out)
    cells = grid_cells(cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_cell, [cfg] * len(cells), cells, [teachers] * len(cells), [out] * len(cells)))
    else:
        results = [run_cell(cfg, cell, teachers, out) for cell in cells]
    rows = [r for r, _ in results]
    summary = out / "summary.csv"
    _write_csv(summary, SUMMARY_COLUMNS, rows)
    _write_csv(out / "timings.csv", TIMING_COLUMNS, [{"cell": r["cell"], "wall_time": t} for r, t in results])
    failed = sum(r["status"] != "ok" for r in rows)
    (out / "DONE").write_text(f'{{"cells": {len(rows)}, "failed": {failed}}}\n')
    return summary


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
