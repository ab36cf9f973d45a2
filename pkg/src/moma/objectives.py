"""Contrastive, reconstruction and feature-alignment losses plus the EMA update."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import AugPolicy, ImageBatch, augment, sample_mask
from .vit import (
    ModelWeights,
    NormHead,
    Projector,
    encode,
    init_norm_head,
    pool,
    student_representation,
    teacher_representation,
    trunc_normal,
)

MODES = ("mae_to_moco", "moco_to_mae", "multi")
MULTI_ROUTINGS = ("masked", "split")


class EmptyMaskWarning(UserWarning):
    pass


# -- elementary losses -------------------------------------------------------


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss; quadratic below ``beta``, linear above. Target is treated as constant."""
    if beta <= 0:
        raise ValueError(f"smooth_l1 beta must be positive, got {beta}")
    target = target.detach() if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ag.ShapeError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    d = pred - target
    small = np.abs(d.data) < beta
    quad = d * d * (0.5 / beta)
    lin = ag.abs_(d) - 0.5 * beta
    return ag.where(small, quad, lin).mean()


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x / ag.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)


def info_nce(queries: Tensor, keys, temperature: float) -> Tensor:
    """In-batch InfoNCE on L2-normalised rows, averaged over query->key and key->query.

    Row i of ``keys`` is the positive for row i of ``queries``; the other B-1
    keys are negatives. Keys are detached.
    """
    if queries.ndim != 2 or queries.shape[0] < 2:
        raise ValueError(f"info_nce needs [B, D] queries with B >= 2, got {queries.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    keys = keys.detach() if isinstance(keys, Tensor) else Tensor(keys, dtype=queries.dtype)
    if keys.shape != queries.shape:
        raise ag.ShapeError(f"queries {queries.shape} and keys {keys.shape} differ")
    b = queries.shape[0]
    logits = ag.matmul(l2_normalize(queries), l2_normalize(keys).transpose()) * (1.0 / temperature)
    diag = (np.arange(b), np.arange(b))
    q_to_k = -ag.log_softmax(logits, axis=1)[diag].mean()
    k_to_q = -ag.log_softmax(logits, axis=0)[diag].mean()
    return (q_to_k + k_to_q) * 0.5


def mae_loss(prediction: Tensor, target_patches, mask) -> Tensor:
    """Per-patch MSE averaged over masked patches only."""
    target = target_patches.detach() if isinstance(target_patches, Tensor) else Tensor(target_patches, dtype=prediction.dtype)
    if prediction.shape != target.shape:
        raise ag.ShapeError(f"prediction {prediction.shape} vs target {target.shape}")
    if prediction.shape[1] != mask.token_count:
        raise ag.ShapeError(f"prediction has {prediction.shape[1]} tokens, mask covers {mask.token_count}")
    masked = mask.boolean().astype(prediction.dtype)
    count = masked.sum()
    if count == 0:
        warnings.warn("mask hides no token; reconstruction loss is 0", EmptyMaskWarning, stacklevel=2)
        return Tensor(0.0, dtype=prediction.dtype)
    diff = prediction - target
    per_patch = (diff * diff).mean(axis=-1)
    return (per_patch * masked).sum() * (1.0 / count)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    logp = ag.log_softmax(logits, axis=-1)
    return -logp[np.arange(len(labels)), labels].mean()


def _param_dict(tree) -> Mapping[str, Tensor]:
    return tree.params if isinstance(tree, ModelWeights) else tree


def ema_update(momentum_weights, main_weights, m: float) -> None:
    """In place: momentum <- m * momentum + (1 - m) * main, matched by name."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum {m} outside [0, 1]")
    mom, main = _param_dict(momentum_weights), _param_dict(main_weights)
    missing = [n for n in mom if n not in main]
    if missing:
        raise ValueError(f"parameter trees differ; main lacks {missing[:3]}")
    for name, t in mom.items():
        src = main[name]
        if src.shape != t.shape:
            raise ValueError(f"parameter {name}: shape {t.shape} vs {src.shape}")
        t.data[...] = m * t.data + (1.0 - m) * src.data


# -- MoCo --------------------------------------------------------------------


def init_mlp_head(prefix: str, dim_in: int, hidden: int, dim_out: int, rng) -> dict[str, Tensor]:
    return {
        f"{prefix}.fc1.weight": Tensor(trunc_normal(rng, (dim_in, hidden)), requires_grad=True),
        f"{prefix}.fc1.bias": Tensor(np.zeros(hidden), requires_grad=True),
        f"{prefix}.fc2.weight": Tensor(trunc_normal(rng, (hidden, dim_out)), requires_grad=True),
        f"{prefix}.fc2.bias": Tensor(np.zeros(dim_out), requires_grad=True),
    }


def mlp_head(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = ag.gelu(ag.linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    return ag.linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


@dataclass
class MoCoState:
    """Query branch (encoder + projector + predictor) and its EMA key branch."""

    main: ModelWeights
    momentum: ModelWeights
    m: float = 0.99
    temperature: float = 0.2

    @classmethod
    def create(cls, main: ModelWeights, rng, m: float = 0.99, temperature: float = 0.2, head_ratio: int = 2):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        d = main.config.dim
        main.params.update(init_mlp_head("moco.projector", d, head_ratio * d, d, rng))
        main.params.update(init_mlp_head("moco.predictor", d, head_ratio * d, d, rng))
        momentum = main.copy(prefixes=[n for n in main.params if not n.startswith("moco.predictor")])
        for t in momentum.params.values():
            t.requires_grad = False
        return cls(main, momentum, m, temperature)

    def query(self, images: np.ndarray) -> Tensor:
        feats = pool(encode(self.main, images), "mean_tokens", self.main.config.use_class_token)
        return mlp_head(mlp_head(feats, self.main.params, "moco.projector"), self.main.params, "moco.predictor")

    def key(self, images: np.ndarray) -> Tensor:
        with ag.no_grad():
            feats = pool(encode(self.momentum, images), "mean_tokens", self.momentum.config.use_class_token)
            return mlp_head(feats, self.momentum.params, "moco.projector")

    def loss(self, view1: np.ndarray, view2: np.ndarray) -> Tensor:
        q1, q2 = self.query(view1), self.query(view2)
        k1, k2 = self.key(view1), self.key(view2)
        return (info_nce(q1, k2, self.temperature) + info_nce(q2, k1, self.temperature)) * 0.5

    def update_momentum(self) -> None:
        ema_update(self.momentum, self.main, self.m)


# -- distillation ------------------------------------------------------------


@dataclass
class DistillConfig:
    mode: str = "moco_to_mae"
    alpha: float = 0.5
    beta: float = 0.5
    mask_ratio: float = 0.9
    student_strong_aug: bool = True
    standard_aug: bool = True
    teacher_mask_ratio: float = 0.0
    smooth_l1_beta: float = 1.0
    pooling: str = "mean_tokens"
    stop_patch_grad: bool = False
    multi_routing: str = "masked"
    shared_projector: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.mode == "multi" and self.alpha + self.beta <= 0:
            raise ValueError("multi mode needs alpha + beta > 0")
        for name in ("mask_ratio", "teacher_mask_ratio"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise ValueError(f"{name}={r} outside [0, 1)")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be positive")
        if self.pooling not in ("mean_tokens", "class_token"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.multi_routing not in MULTI_ROUTINGS:
            raise ValueError(f"multi_routing must be one of {MULTI_ROUTINGS}")


def sub_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


_BASE, _MASK, _STRONG, _TEACHER_MASK = range(4)


@dataclass
class Views:
    """Inputs prepared for one distillation step."""

    teacher: np.ndarray
    student: np.ndarray
    student_mask: object
    teacher_mask: object = None
    strong: np.ndarray | None = None
    record: dict = field(default_factory=dict)


def prepare_views(batch: ImageBatch, config: DistillConfig, token_count: int, seed: int, dtype=np.float32) -> Views:
    base = augment(batch, AugPolicy.standard(), sub_seed(seed, _BASE)) if config.standard_aug else batch
    record = {"teacher_view": "standard" if config.standard_aug else "original"}

    strong_view = None
    wants_strong = config.student_strong_aug and (
        config.mode == "moco_to_mae" or (config.mode == "multi" and config.multi_routing == "split")
    )
    if wants_strong:
        strong_view = augment(base, AugPolicy.strong().photometric_only(), sub_seed(seed, _STRONG))

    smask = sample_mask(len(batch), token_count, config.mask_ratio, sub_seed(seed, _MASK))
    tmask = None
    if config.teacher_mask_ratio > 0:
        tmask = sample_mask(len(batch), token_count, config.teacher_mask_ratio, sub_seed(seed, _TEACHER_MASK))
        record["teacher_view"] += "+masked"

    if config.mode == "moco_to_mae" and strong_view is not None:
        student = strong_view.normalized(dtype)
        record["student_view"] = "strong+masked"
        strong = None
    else:
        student = base.normalized(dtype)
        record["student_view"] = "masked"
        strong = strong_view.normalized(dtype) if strong_view is not None else None
        if strong is not None:
            record["student_view"] += ",strong"
    record["visible_tokens"] = smask.visible_count
    return Views(base.normalized(dtype), student, smask, tmask, strong, record)


def _teacher_target(teacher: ModelWeights, head: NormHead, views: Views, config: DistillConfig) -> Tensor:
    feats = encode(teacher, views.teacher, views.teacher_mask)
    return teacher_representation(feats, head, config.pooling, teacher.config.use_class_token)


def single_teacher_loss(
    teacher: ModelWeights,
    student: ModelWeights,
    projector: Projector,
    norm_head: NormHead,
    batch: ImageBatch,
    config: DistillConfig,
    seed: int = 0,
) -> tuple[Tensor, dict]:
    """Smooth-L1 between the projected masked-student and normalised teacher representations."""
    if not teacher.is_teacher:
        raise ValueError(f"teacher weights carry role {teacher.role!r}")
    if projector.out_dim != teacher.config.dim or projector.weight.shape[0] != student.config.dim:
        raise ag.ShapeError(
            f"projector {projector.weight.shape} does not map student {student.config.dim} -> teacher {teacher.config.dim}"
        )
    views = prepare_views(batch, config, student.config.num_patches, seed, student["patch_embed.weight"].dtype)
    target = _teacher_target(teacher, norm_head, views, config)
    feats = encode(student, views.student, views.student_mask, config.stop_patch_grad)
    pred = student_representation(feats, projector, config.pooling, student.config.use_class_token)
    loss = smooth_l1(pred, target, config.smooth_l1_beta)
    record = dict(views.record, loss=float(loss.data))
    return loss, record


def multi_teacher_loss(
    t_mae: ModelWeights,
    t_moco: ModelWeights,
    student: ModelWeights,
    projectors: Mapping[str, Projector],
    norm_heads: Mapping[str, NormHead],
    batch: ImageBatch,
    config: DistillConfig,
    seed: int = 0,
) -> tuple[Tensor, dict]:
    """alpha * align(MAE teacher) + beta * align(MoCo teacher); projectors keyed 'mae' and 'moco'."""
    for t in (t_mae, t_moco):
        if not t.is_teacher:
            raise ValueError(f"teacher weights carry role {t.role!r}")
    views = prepare_views(batch, config, student.config.num_patches, seed, student["patch_embed.weight"].dtype)
    cls = student.config.use_class_token

    masked_feats = encode(student, views.student, views.student_mask, config.stop_patch_grad)
    masked_pooled = pool(masked_feats, config.pooling, cls)
    moco_pooled = masked_pooled
    if config.multi_routing == "split" and views.strong is not None:
        moco_pooled = pool(encode(student, views.strong, None, config.stop_patch_grad), config.pooling, cls)

    terms = {}
    loss = None
    for name, teacher, weight, pooled in (
        ("mae", t_mae, config.alpha, masked_pooled),
        ("moco", t_moco, config.beta, moco_pooled),
    ):
        target = _teacher_target(teacher, norm_heads[name], views, config)
        term = smooth_l1(projectors[name](pooled), target, config.smooth_l1_beta)
        terms[name] = term
        loss = term * weight if loss is None else loss + term * weight
    record = dict(
        views.record,
        loss=float(loss.data),
        loss_mae=float(terms["mae"].data),
        loss_moco=float(terms["moco"].data),
    )
    return loss, record


def default_norm_heads(t_mae: ModelWeights | None, t_moco: ModelWeights | None) -> dict[str, NormHead]:
    heads = {}
    if t_mae is not None:
        heads["mae"] = init_norm_head(t_mae.config.dim)
    if t_moco is not None:
        heads["moco"] = init_norm_head(t_moco.config.dim)
    return heads
