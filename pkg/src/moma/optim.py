"""AdamW with decoupled weight decay and a linear-warmup cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor

# published pre-training and fine-tuning recipes
PRETRAIN_LR = 1.5e-4
PRETRAIN_BETAS = (0.9, 0.95)
FINETUNE_LR = 1.5e-3
FINETUNE_BETAS = (0.9, 0.999)
WEIGHT_DECAY = 0.05
REFERENCE_BATCH = 4096


class NonFiniteGradientError(FloatingPointError):
    pass


def scaled_lr(base_lr: float, batch_size: int, reference: int = REFERENCE_BATCH) -> float:
    """Linear scaling rule: lr grows with batch size relative to ``reference``."""
    return base_lr * batch_size / reference


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = WEIGHT_DECAY
    base_lr: float = PRETRAIN_LR
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)

    def ensure(self, params: Sequence[Tensor]) -> None:
        if not self.exp_avg:
            self.exp_avg = [np.zeros_like(p.data) for p in params]
            self.exp_avg_sq = [np.zeros_like(p.data) for p in params]
        elif len(self.exp_avg) != len(params) or any(m.shape != p.shape for m, p in zip(self.exp_avg, params)):
            raise ValueError("optimizer state does not match parameter list")


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None] | None, state: OptimizerState, lr: float) -> None:
    """One AdamW update in place: decay ``p -= lr*wd*p`` then the bias-corrected Adam step.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient counts as zero.
    """
    if lr < 0:
        raise ValueError(f"negative learning rate {lr}")
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    grads = [np.zeros_like(p.data) if g is None else np.asarray(g) for p, g in zip(params, grads)]
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in parameter {i} (shape {params[i].shape})")
    state.ensure(params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        p.data *= 1.0 - lr * state.weight_decay
        denom = np.sqrt(v / bc2) + state.eps
        p.data -= lr * (m / bc1) / denom


class AdamW:
    """Parameter list bound to an :class:`OptimizerState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = PRETRAIN_LR, betas=PRETRAIN_BETAS,
                 weight_decay: float = WEIGHT_DECAY, eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(betas[0], betas[1], eps, weight_decay, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adamw_step(self.params, None, self.state, self.state.base_lr if lr is None else lr)


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    warmup_steps: int
    base_lr: float
    min_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} must lie in [0, {self.total_steps})")


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear ramp from 0 to base_lr over warmup, then cosine decay to min_lr."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * progress))
