"""Training entry points: MoCo / MAE pre-training, distillation, fine-tuning, linear probing.

Every run writes into its own directory: ``config.resolved.toml``,
``metrics.csv``, ``final.ckpt`` (plus periodic ``step_*.ckpt``) and a
``DONE`` marker holding a JSON summary.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import MetricsLog, append_metrics, load_checkpoint, save_checkpoint
from .config import check_checkpoints, distill_config, write_snapshot
from .data import AugPolicy, Dataset, ImageBatch, augment, build_dataset, iter_batches, sample_mask, steps_per_epoch
from .objectives import (
    MoCoState,
    cross_entropy,
    default_norm_heads,
    mae_loss,
    multi_teacher_loss,
    single_teacher_loss,
)
from .optim import NonFiniteGradientError, OptimizerState, Schedule, adamw_step, lr_at
from .vit import (
    Classifier,
    ModelWeights,
    Projector,
    decode_mae,
    encode,
    init_classifier,
    init_projector,
    init_weights,
    patchify,
    pool,
    preset,
)

log = logging.getLogger(__name__)

# seed streams
_STUDENT_INIT, _TEACHER_MAE_INIT, _TEACHER_MOCO_INIT, _PROJECTOR_INIT, _HEAD_INIT, _MOCO_INIT, _STEP = range(7)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Path | None):
        super().__init__(f"{message}; last good checkpoint: {last_good}")
        self.last_good = last_good


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass
class RunResult:
    out_dir: Path
    checkpoint: Path
    steps: int
    final_loss: float | None = None
    accuracy: float | None = None
    history: list[dict] = field(default_factory=list)
    state: dict[str, Any] = field(default_factory=dict)


# -- shared plumbing -----------------------------------------------------------


def make_schedule(cfg: dict, n_samples: int) -> Schedule:
    run, optim = cfg["run"], cfg["optim"]
    total = run["epochs"] * steps_per_epoch(n_samples, run["batch_size"])
    if run["max_steps"]:
        total = min(total, run["max_steps"])
    warmup = int(round(total * run["warmup_epochs"] / run["epochs"]))
    warmup = min(warmup, total - 1)
    base = optim["lr"] * run["batch_size"] / optim["reference_batch"] if optim["scale_lr"] else optim["lr"]
    return Schedule(total, warmup, base, optim["min_lr"])


def _step_indices(n: int, cfg: dict, total_steps: int):
    run = cfg["run"]
    step, epoch = 0, 0
    while step < total_steps:
        for idx in iter_batches(n, run["batch_size"], run["seed"], epoch):
            if step >= total_steps:
                return
            yield step, idx
            step += 1
        epoch += 1


def _start_run(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stale in ("DONE", "metrics.csv"):
        (out / stale).unlink(missing_ok=True)
    write_snapshot(cfg, out / "config.resolved.toml")
    return out


def _finish_run(out: Path, summary: dict) -> None:
    (out / "DONE").write_text(json.dumps(summary, sort_keys=True) + "\n")


def _fit(
    cfg: dict,
    out: Path,
    n_samples: int,
    params: list[Tensor],
    loss_fn: Callable[[np.ndarray, int, int], tuple[Tensor, dict]],
    save_fn: Callable[[Path], Path],
    metric_names: tuple[str, ...] = (),
    after_step: Callable[[], None] | None = None,
    check_fn: Callable[[], dict] | None = None,
    schedule: Schedule | None = None,
) -> tuple[list[dict], Schedule]:
    """Sequential step loop: loss, backward, optional invariant check, AdamW, log, checkpoint."""
    run, optim = cfg["run"], cfg["optim"]
    schedule = schedule or make_schedule(cfg, n_samples)
    state = OptimizerState(optim["beta1"], optim["beta2"], optim["eps"], optim["weight_decay"], schedule.base_lr)
    metrics_log = MetricsLog(out / "metrics.csv", ("loss",) + tuple(metric_names))
    run_id = run["run_id"] or run["kind"]
    history: list[dict] = []
    last_good: Path | None = None
    started = time.perf_counter()

    for step, idx in _step_indices(n_samples, cfg, schedule.total_steps):
        step_seed = derive_seed(run["seed"], _STEP, step)
        loss, metrics = loss_fn(idx, step_seed, step)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}", last_good)
        ag.backward(loss)
        if check_fn is not None and step % max(1, run["assert_every"]) == 0:
            metrics.update(check_fn())
        lr = lr_at(schedule, step)
        try:
            adamw_step(params, None, state, lr)
        except NonFiniteGradientError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", last_good) from exc
        for p in params:
            p.grad = None
        if after_step is not None:
            after_step()
        row = {"run_id": run_id, "step": step, "wall_time": time.perf_counter() - started, "lr": lr, "loss": value}
        row.update({k: v for k, v in metrics.items() if k in metric_names})
        append_metrics(metrics_log, row)
        history.append(row)
        every = run["checkpoint_every"]
        if every and (step + 1) % every == 0:
            last_good = save_fn(out / f"step_{step + 1:06d}.ckpt")
        if step % 50 == 0:
            log.info("%s step %d/%d loss %.5f lr %.3g", run_id, step, schedule.total_steps, value, lr)
    return history, schedule


def _model_config(cfg: dict):
    return preset(cfg["model"]["preset"], use_class_token=cfg["model"]["use_class_token"])


def _input_dtype(weights: ModelWeights):
    return weights["patch_embed.weight"].dtype


def load_encoder(path, role: str) -> ModelWeights:
    return load_checkpoint(path).encoder_only(role=role)


# -- MoCo pre-training --------------------------------------------------------


def run_pretrain_moco(cfg: dict, out_dir) -> RunResult:
    """Contrastive pre-training; saves the query encoder tagged ``teacher_moco``."""
    check_checkpoints(cfg)
    out = _start_run(cfg, out_dir)
    data = build_dataset(cfg["data"], "train")
    seed = cfg["run"]["seed"]
    if cfg["model"]["init"] == "random":
        main = init_weights(_model_config(cfg), derive_seed(seed, _STUDENT_INIT), role="pretrain")
    else:
        main = load_encoder(cfg["model"]["init"], "pretrain")
    mcfg = cfg["moco"]
    moco = MoCoState.create(main, derive_seed(seed, _MOCO_INIT), mcfg["momentum"], mcfg["temperature"], mcfg["head_ratio"])
    policy = {"strong": AugPolicy.strong(), "standard": AugPolicy.standard(), "none": AugPolicy.identity()}[
        mcfg["augment"]]
    dtype = _input_dtype(main)

    def loss_fn(idx, step_seed, step):
        batch = data.batch(idx)
        v1 = augment(batch, policy, derive_seed(step_seed, 1)).normalized(dtype)
        v2 = augment(batch, policy, derive_seed(step_seed, 2)).normalized(dtype)
        return moco.loss(v1, v2), {}

    def save(path):
        save_checkpoint(main, path.with_name(path.stem + "_full.ckpt"), {"kind": "moco_query"})
        return save_checkpoint(main.encoder_only(role="teacher_moco"), path, {"kind": "pretrain-moco"})

    history, _ = _fit(cfg, out, len(data), main.parameters(), loss_fn, save, after_step=moco.update_momentum)
    final = save(out / "final.ckpt")
    result = RunResult(out, final, len(history), history[-1]["loss"] if history else None, history=history,
                       state={"moco": moco})
    _finish_run(out, {"kind": "pretrain-moco", "steps": result.steps, "final_loss": result.final_loss})
    return result


# -- MAE pre-training ---------------------------------------------------------


def mae_step_loss(weights: ModelWeights, images: np.ndarray, mask_ratio: float, mask_seed: int) -> Tensor:
    n = weights.config.num_patches
    mask = sample_mask(len(images), n, mask_ratio, mask_seed)
    pred = decode_mae(weights, encode(weights, images, mask), mask)
    return mae_loss(pred, Tensor(patchify(images, weights.config), dtype=pred.dtype), mask)


def run_pretrain_mae(cfg: dict, out_dir) -> RunResult:
    """Masked reconstruction pre-training; saves the encoder tagged ``teacher_mae``."""
    check_checkpoints(cfg)
    out = _start_run(cfg, out_dir)
    data = build_dataset(cfg["data"], "train")
    seed = cfg["run"]["seed"]
    weights = init_weights(_model_config(cfg), derive_seed(seed, _STUDENT_INIT), role="pretrain", decoder=True)
    if cfg["model"]["init"] != "random":
        for name, t in load_encoder(cfg["model"]["init"], "pretrain").params.items():
            weights.params[name].data[...] = t.data
    ratio = cfg["mae"]["mask_ratio"]
    policy = AugPolicy.standard() if cfg["mae"]["augment"] else None
    dtype = _input_dtype(weights)

    def loss_fn(idx, step_seed, step):
        batch = data.batch(idx)
        if policy is not None:
            batch = augment(batch, policy, derive_seed(step_seed, 1))
        return mae_step_loss(weights, batch.normalized(dtype), ratio, derive_seed(step_seed, 2)), {}

    def save(path):
        save_checkpoint(weights, path.with_name(path.stem + "_full.ckpt"), {"kind": "mae_full"})
        return save_checkpoint(weights.encoder_only(role="teacher_mae"), path, {"kind": "pretrain-mae"})

    history, _ = _fit(cfg, out, len(data), weights.parameters(), loss_fn, save)
    final = save(out / "final.ckpt")
    result = RunResult(out, final, len(history), history[-1]["loss"] if history else None, history=history,
                       state={"weights": weights})
    _finish_run(out, {"kind": "pretrain-mae", "steps": result.steps, "final_loss": result.final_loss})
    return result


# -- distillation ---------------------------------------------------------------


@dataclass
class DistillSetup:
    teachers: dict[str, ModelWeights]
    student: ModelWeights
    projectors: dict[str, Projector]
    norm_heads: dict
    config: Any

    def trainable(self) -> list[Tensor]:
        params = self.student.parameters()
        seen = set()
        for proj in self.projectors.values():
            if id(proj) not in seen:
                seen.add(id(proj))
                params += proj.parameters()
        return params

    def loss(self, batch: ImageBatch, seed: int) -> tuple[Tensor, dict]:
        dc = self.config
        if dc.mode == "multi":
            return multi_teacher_loss(
                self.teachers["mae"], self.teachers["moco"], self.student, self.projectors, self.norm_heads, batch, dc, seed
            )
        name = "mae" if dc.mode == "mae_to_moco" else "moco"
        return single_teacher_loss(
            self.teachers[name], self.student, self.projectors[name], self.norm_heads[name], batch, dc, seed
        )

    def student_checkpoint_weights(self) -> ModelWeights:
        params = dict(self.student.params)
        for name, proj in self.projectors.items():
            params[f"projector.{name}.weight"] = proj.weight
            params[f"projector.{name}.bias"] = proj.bias
        return ModelWeights(self.student.config, params, "student")


def teacher_names(mode: str) -> tuple[str, ...]:
    return {"mae_to_moco": ("mae",), "moco_to_mae": ("moco",), "multi": ("mae", "moco")}[mode]


def build_distill(cfg: dict) -> DistillSetup:
    dc = distill_config(cfg)
    seed = cfg["run"]["seed"]
    if cfg["model"]["init"] == "random":
        student = init_weights(_model_config(cfg), derive_seed(seed, _STUDENT_INIT), role="student")
    else:
        student = load_encoder(cfg["model"]["init"], "student")

    teachers = {}
    tcfg = cfg["teacher"]
    for name in teacher_names(dc.mode):
        role = f"teacher_{name}"
        if tcfg["init"] == "checkpoint":
            teachers[name] = load_encoder(tcfg[f"{name}_checkpoint"], role)
        elif tcfg["init"] == "student":
            teachers[name] = student.copy(role=role)
        elif tcfg["init"] == "random":
            stream = _TEACHER_MAE_INIT if name == "mae" else _TEACHER_MOCO_INIT
            teachers[name] = init_weights(preset(tcfg["preset"]), derive_seed(seed, stream), role=role)
        else:
            raise ValueError(f"teacher.init must be checkpoint, random or student, got {tcfg['init']!r}")

    rng = np.random.default_rng(derive_seed(seed, _PROJECTOR_INIT))
    identity = cfg["distill"]["identity_projector"]
    projectors: dict[str, Projector] = {}
    for name, teacher in teachers.items():
        if dc.shared_projector and projectors and next(iter(projectors.values())).out_dim == teacher.config.dim:
            projectors[name] = next(iter(projectors.values()))
        else:
            projectors[name] = init_projector(student.config.dim, teacher.config.dim, rng, identity=identity)
    heads = default_norm_heads(teachers.get("mae"), teachers.get("moco"))
    return DistillSetup(teachers, student, projectors, heads, dc)


def _grad_norm(params) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))


def check_gradient_routing(setup: DistillSetup) -> dict:
    """Teachers hold no gradient; student and projectors do."""
    teacher_norm = sum(_grad_norm(t.parameters()) for t in setup.teachers.values())
    if teacher_norm != 0.0 or any(p.grad is not None for t in setup.teachers.values() for p in t.parameters()):
        raise AssertionError(f"teacher parameters received gradient (norm {teacher_norm})")
    trainable = setup.trainable()
    if not any(p.grad is not None and np.any(p.grad) for p in trainable):
        raise AssertionError("no student or projector parameter received gradient")
    return {"teacher_grad_norm": teacher_norm, "student_grad_norm": _grad_norm(trainable)}


def run_distill(cfg: dict, out_dir, setup: DistillSetup | None = None, dataset: Dataset | None = None) -> RunResult:
    """Align a masked student to frozen teacher(s); only student and projector(s) train."""
    if setup is None:
        check_checkpoints(cfg)
        setup = build_distill(cfg)
    out = _start_run(cfg, out_dir)
    data = dataset if dataset is not None else build_dataset(cfg["data"], "train")
    multi = setup.config.mode == "multi"
    names = ("teacher_grad_norm", "student_grad_norm") + (("loss_mae", "loss_moco") if multi else ())

    def loss_fn(idx, step_seed, step):
        return setup.loss(data.batch(idx), step_seed)

    def save(path):
        return save_checkpoint(setup.student_checkpoint_weights(), path, {"kind": "distill", "mode": setup.config.mode})

    history, _ = _fit(cfg, out, len(data), setup.trainable(), loss_fn, save, names,
                      check_fn=lambda: check_gradient_routing(setup))
    final = save(out / "final.ckpt")
    result = RunResult(out, final, len(history), history[-1]["loss"] if history else None, history=history,
                       state={"setup": setup})
    _finish_run(out, {"kind": "distill", "mode": setup.config.mode, "steps": result.steps,
                      "final_loss": result.final_loss})
    return result


# -- classification --------------------------------------------------------------


@dataclass
class ClassifierModel:
    """Encoder + linear head; ``feature_mean``/``feature_std`` standardise pooled features when set."""

    weights: ModelWeights
    head: Classifier
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None

    def features(self, images: np.ndarray) -> Tensor:
        feats = pool(encode(self.weights, images), self.head.pooling, self.weights.config.use_class_token)
        if self.feature_mean is not None:
            feats = (feats - self.feature_mean) / self.feature_std
        return feats

    def logits(self, images: np.ndarray) -> Tensor:
        return ag.linear(self.features(images), self.head.weight, self.head.bias)

    def predict(self, batch: ImageBatch) -> np.ndarray:
        with ag.no_grad():
            return np.argmax(self.logits(batch.normalized(_input_dtype(self.weights))).data, axis=-1)

    def to_weights(self) -> ModelWeights:
        params = dict(self.weights.params)
        params["head.weight"], params["head.bias"] = self.head.weight, self.head.bias
        if self.feature_mean is not None:
            params["probe.mean"] = Tensor(self.feature_mean)
            params["probe.std"] = Tensor(self.feature_std)
        return ModelWeights(self.weights.config, params, "classifier")

    @classmethod
    def from_weights(cls, weights: ModelWeights, pooling: str = "mean_tokens") -> "ClassifierModel":
        params = weights.params
        head = Classifier(params["head.weight"], params["head.bias"], pooling)
        mean = params["probe.mean"].data if "probe.mean" in params else None
        std = params["probe.std"].data if "probe.std" in params else None
        return cls(weights.encoder_only(role="classifier"), head, mean, std)


def evaluate_top1(model, dataset: Dataset, batch_size: int = 256) -> float:
    """Fraction of correct argmax predictions; ``model`` has ``predict(batch)`` or is a callable."""
    if dataset.labels is None:
        raise ValueError("dataset has no labels")
    predict = model.predict if hasattr(model, "predict") else model
    correct = 0
    for start in range(0, len(dataset), batch_size):
        batch = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
        correct += int(np.sum(np.asarray(predict(batch)) == batch.labels))
    return correct / len(dataset)


def _load_backbone(cfg: dict, role: str = "classifier") -> ModelWeights:
    ckpt = cfg["finetune"]["checkpoint"]
    if ckpt == "random":
        return init_weights(_model_config(cfg), derive_seed(cfg["run"]["seed"], _STUDENT_INIT), role=role)
    return load_encoder(ckpt, role)


def run_finetune(cfg: dict, out_dir, weights: ModelWeights | None = None) -> RunResult:
    """End-to-end supervised training of encoder + linear head; reports held-out top-1."""
    if weights is None:
        check_checkpoints(cfg)
        weights = _load_backbone(cfg)
    else:
        weights = weights.encoder_only(role="classifier")
    out = _start_run(cfg, out_dir)
    train, test = build_dataset(cfg["data"], "train"), build_dataset(cfg["data"], "test")
    if train.labels is None:
        raise ValueError("fine-tuning needs labels")
    rng = np.random.default_rng(derive_seed(cfg["run"]["seed"], _HEAD_INIT))
    head = init_classifier(weights.config.dim, train.num_classes, rng, cfg["finetune"]["pooling"])
    model = ClassifierModel(weights, head)
    policy = AugPolicy.standard() if cfg["finetune"]["augment"] else None
    dtype = _input_dtype(weights)

    def loss_fn(idx, step_seed, step):
        batch = train.batch(idx)
        if policy is not None:
            batch = augment(batch, policy, derive_seed(step_seed, 1))
        return cross_entropy(model.logits(batch.normalized(dtype)), batch.labels), {}

    def save(path):
        return save_checkpoint(model.to_weights(), path, {"kind": "finetune", "num_classes": train.num_classes,
                                                           "pooling": head.pooling})

    history, _ = _fit(cfg, out, len(train), weights.parameters() + head.parameters(), loss_fn, save)
    final = save(out / "final.ckpt")
    acc = evaluate_top1(model, test, cfg["finetune"]["eval_batch_size"])
    result = RunResult(out, final, len(history), history[-1]["loss"] if history else None, acc, history,
                       {"model": model})
    _finish_run(out, {"kind": "finetune", "steps": result.steps, "accuracy": acc, "final_loss": result.final_loss})
    return result


def extract_features(weights: ModelWeights, dataset: Dataset, pooling: str = "mean_tokens", batch_size: int = 256) -> np.ndarray:
    chunks = []
    dtype = _input_dtype(weights)
    with ag.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
            feats = pool(encode(weights, batch.normalized(dtype)), pooling, weights.config.use_class_token)
            chunks.append(feats.data)
    return np.concatenate(chunks)


def run_linear_probe(cfg: dict, out_dir, weights: ModelWeights | None = None) -> RunResult:
    """Train a linear head on frozen, standardised pooled features; reports held-out top-1."""
    if weights is None:
        check_checkpoints(cfg)
        weights = _load_backbone(cfg)
    else:
        weights = weights.encoder_only(role="classifier")
    for t in weights.parameters():
        t.requires_grad = False
    out = _start_run(cfg, out_dir)
    train, test = build_dataset(cfg["data"], "train"), build_dataset(cfg["data"], "test")
    pooling = cfg["finetune"]["pooling"]
    feats = extract_features(weights, train, pooling)
    mean, std = feats.mean(axis=0), feats.std(axis=0) + 1e-6
    feats = ((feats - mean) / std).astype(feats.dtype)
    rng = np.random.default_rng(derive_seed(cfg["run"]["seed"], _HEAD_INIT))
    head = init_classifier(weights.config.dim, train.num_classes, rng, pooling)
    model = ClassifierModel(weights, head, mean.astype(feats.dtype), std.astype(feats.dtype))

    def loss_fn(idx, step_seed, step):
        logits = ag.linear(Tensor(feats[idx], dtype=feats.dtype), head.weight, head.bias)
        return cross_entropy(logits, train.labels[idx]), {}

    def save(path):
        return save_checkpoint(model.to_weights(), path, {"kind": "probe", "num_classes": train.num_classes,
                                                           "pooling": pooling})

    history, _ = _fit(cfg, out, len(train), head.parameters(), loss_fn, save)
    final = save(out / "final.ckpt")
    acc = evaluate_top1(model, test, cfg["finetune"]["eval_batch_size"])
    result = RunResult(out, final, len(history), history[-1]["loss"] if history else None, acc, history,
                       {"model": model})
    _finish_run(out, {"kind": "probe", "steps": result.steps, "accuracy": acc, "final_loss": result.final_loss})
    return result


def run_eval(cfg: dict, out_dir) -> RunResult:
    check_checkpoints(cfg)
    out = _start_run(cfg, out_dir)
    weights, extra = load_checkpoint(cfg["finetune"]["checkpoint"], with_extra=True)
    model = ClassifierModel.from_weights(weights, extra.get("pooling", "mean_tokens"))
    test = build_dataset(cfg["data"], "test")
    acc = evaluate_top1(model, test, cfg["finetune"]["eval_batch_size"])
    final = save_checkpoint(model.to_weights(), out / "final.ckpt", {"kind": "eval", **extra})
    _finish_run(out, {"kind": "eval", "accuracy": acc})
    return RunResult(out, final, 0, None, acc)


RUNNERS = {
    "pretrain-moco": run_pretrain_moco,
    "pretrain-mae": run_pretrain_mae,
    "distill": run_distill,
    "finetune": run_finetune,
    "probe": run_linear_probe,
    "eval": run_eval,
}
