"""Run configuration: TOML files with one section per component, dotted overrides."""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Iterable

import tomli
import tomli_w

from .objectives import DistillConfig
from .optim import FINETUNE_BETAS, FINETUNE_LR, PRETRAIN_BETAS, PRETRAIN_LR, REFERENCE_BATCH, WEIGHT_DECAY
from .vit import PRESETS

RUN_KINDS = ("pretrain-moco", "pretrain-mae", "distill", "finetune", "probe", "eval", "ablate", "grad-check")


class ConfigError(ValueError):
    pass


_DISTILL_DEFAULTS = {
    "mode": "moco_to_mae",
    "alpha": 0.5,
    "beta": 0.5,
    "mask_ratio": 0.9,
    "student_strong_aug": True,
    "standard_aug": True,
    "teacher_mask_ratio": 0.0,
    "smooth_l1_beta": 1.0,
    "pooling": "mean_tokens",
    "stop_patch_grad": False,
    "multi_routing": "masked",
    "shared_projector": False,
    "identity_projector": False,
}

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {
        "kind": "distill",
        "seed": 0,
        "run_id": "",
        "epochs": 100,
        "warmup_epochs": 20,
        "max_steps": 0,
        "batch_size": 128,
        "checkpoint_every": 0,
        "assert_every": 10,
        "workers": 0,
    },
    # the network being trained: student, pre-training target or classifier backbone
    "model": {"preset": "micro", "use_class_token": False, "init": "random"},
    "teacher": {"preset": "micro", "init": "checkpoint", "mae_checkpoint": "", "moco_checkpoint": ""},
    "distill": dict(_DISTILL_DEFAULTS),
    "optim": {
        "lr": PRETRAIN_LR,
        "beta1": PRETRAIN_BETAS[0],
        "beta2": PRETRAIN_BETAS[1],
        "weight_decay": WEIGHT_DECAY,
        "eps": 1e-8,
        "min_lr": 0.0,
        "scale_lr": True,
        "reference_batch": REFERENCE_BATCH,
    },
    # augment: view policy, "strong" per the MoCo recipe; "standard" or "none" suit colour-coded toy data
    "moco": {"momentum": 0.99, "temperature": 0.2, "head_ratio": 2, "augment": "strong"},
    "mae": {"mask_ratio": 0.75, "augment": True},
    "finetune": {"checkpoint": "", "augment": True, "pooling": "mean_tokens", "eval_batch_size": 256},
    "data": {
        "kind": "synthetic",
        "path": "",
        "n_train": 512,
        "n_test": 256,
        "classes": 2,
        "seed": 0,
        "image_size": 32,
        "noise": 0.05,
        "jitter": 2,
        "train_limit": 0,
        "test_limit": 0,
    },
    "ablate": {
        "modes": ["moco_to_mae", "mae_to_moco", "multi"],
        "mask_ratios": [0.9],
        "sizes": ["tiny:micro"],
        "student_init": "random",
        "pretrain_epochs": 20,
        "distill_epochs": 10,
        "probe_epochs": 10,
        "pretrain_lr": 0.0,
        "distill_lr": 0.0,
        "probe_lr": 0.0,
        "random_baseline": True,
        "jobs": 1,
    },
}


def default_config(kind: str = "distill") -> dict:
    """Defaults for ``kind``; recipe constants follow the published pre-training and fine-tuning setups."""
    if kind not in RUN_KINDS:
        raise ConfigError(f"unknown run kind {kind!r}")
    cfg = copy.deepcopy(DEFAULTS)
    cfg["run"]["kind"] = kind
    if kind in ("finetune", "probe", "eval"):
        cfg["optim"].update(lr=FINETUNE_LR, beta1=FINETUNE_BETAS[0], beta2=FINETUNE_BETAS[1])
        cfg["run"]["warmup_epochs"] = 5
    return cfg


def _check_type(section: str, key: str, value, default) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return value
    return value


def merge(base: dict, updates: dict) -> dict:
    out = copy.deepcopy(base)
    for section, values in updates.items():
        if section not in out:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            out[section][key] = _check_type(section, key, value, DEFAULTS[section][key])
    return out


def parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_overrides(pairs: Iterable[str]) -> dict:
    updates: dict[str, dict] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, text = pair.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must look like section.key")
        updates.setdefault(parts[0], {})[parts[1]] = parse_value(text.strip())
    return updates


def load_config(path=None, overrides: Iterable[str] = (), kind: str | None = None) -> dict:
    """Defaults for the run kind, then the file, then ``--set`` overrides; validated."""
    file_values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            file_values = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    kind = kind or file_values.get("run", {}).get("kind", "distill")
    cfg = merge(default_config(kind), file_values)
    cfg = merge(cfg, parse_overrides(overrides))
    if kind:
        cfg["run"]["kind"] = kind
    validate(cfg)
    return cfg


def distill_config(cfg: dict) -> DistillConfig:
    values = {k: v for k, v in cfg["distill"].items() if k != "identity_projector"}
    return DistillConfig(**values)


def validate(cfg: dict) -> None:
    run = cfg["run"]
    if run["kind"] not in RUN_KINDS:
        raise ConfigError(f"run.kind {run['kind']!r} not in {RUN_KINDS}")
    if run["epochs"] < 1:
        raise ConfigError("run.epochs must be >= 1")
    if not 0 <= run["warmup_epochs"] < run["epochs"]:
        raise ConfigError(f"run.warmup_epochs {run['warmup_epochs']} must lie in [0, epochs={run['epochs']})")
    if run["batch_size"] < 1 or run["max_steps"] < 0:
        raise ConfigError("run.batch_size must be >= 1 and run.max_steps >= 0")
    if run["kind"] == "pretrain-moco" and run["batch_size"] < 2:
        raise ConfigError("contrastive pre-training needs batch_size >= 2")
    for section in ("model", "teacher"):
        if cfg[section]["preset"] not in PRESETS:
            raise ConfigError(f"{section}.preset {cfg[section]['preset']!r} not in {sorted(PRESETS)}")
    try:
        distill_config(cfg)
    except ValueError as exc:
        raise ConfigError(f"distill: {exc}") from exc
    if not 0.0 <= cfg["mae"]["mask_ratio"] < 1.0:
        raise ConfigError(f"mae.mask_ratio {cfg['mae']['mask_ratio']} outside [0, 1)")
    optim = cfg["optim"]
    if optim["lr"] < 0 or optim["min_lr"] < 0 or optim["weight_decay"] < 0:
        raise ConfigError("optim.lr, optim.min_lr and optim.weight_decay must be non-negative")
    if not (0 <= optim["beta1"] < 1 and 0 <= optim["beta2"] < 1):
        raise ConfigError("optim betas must lie in [0, 1)")
    if not 0.0 <= cfg["moco"]["momentum"] <= 1.0 or cfg["moco"]["temperature"] <= 0:
        raise ConfigError("moco.momentum must lie in [0, 1] and moco.temperature be positive")
    if cfg["moco"]["augment"] not in ("strong", "standard", "none"):
        raise ConfigError(f"moco.augment {cfg['moco']['augment']!r} must be strong, standard or none")
    if cfg["data"]["kind"] not in ("synthetic", "cifar10"):
        raise ConfigError(f"data.kind {cfg['data']['kind']!r} must be synthetic or cifar10")
    for size in cfg["ablate"]["sizes"]:
        parts = str(size).split(":")
        if len(parts) != 2 or any(p not in PRESETS for p in parts):
            raise ConfigError(f"ablate.sizes entry {size!r} must be 'teacher:student' preset names")
    for ratio in cfg["ablate"]["mask_ratios"]:
        if not 0.0 <= ratio < 1.0:
            raise ConfigError(f"ablate.mask_ratios entry {ratio} outside [0, 1)")


def check_checkpoints(cfg: dict) -> None:
    """Every checkpoint the run reads must exist."""
    kind = cfg["run"]["kind"]
    needed = []
    if kind == "distill" and cfg["teacher"]["init"] == "checkpoint":
        mode = cfg["distill"]["mode"]
        if mode in ("mae_to_moco", "multi"):
            needed.append(("teacher.mae_checkpoint", cfg["teacher"]["mae_checkpoint"]))
        if mode in ("moco_to_mae", "multi"):
            needed.append(("teacher.moco_checkpoint", cfg["teacher"]["moco_checkpoint"]))
    if kind in ("distill", "pretrain-moco", "pretrain-mae") and cfg["model"]["init"] != "random":
        needed.append(("model.init", cfg["model"]["init"]))
    if kind == "eval" or (kind in ("finetune", "probe") and cfg["finetune"]["checkpoint"] != "random"):
        needed.append(("finetune.checkpoint", cfg["finetune"]["checkpoint"]))
    for key, value in needed:
        if not value:
            raise ConfigError(f"{key} is required for {kind}")
        if not Path(value).is_file():
            raise ConfigError(f"{key}: checkpoint {value} not found")


def dumps(cfg: dict) -> str:
    return tomli_w.dumps(cfg)


def write_snapshot(cfg: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))
    return path
