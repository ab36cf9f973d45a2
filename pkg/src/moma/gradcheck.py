"""Finite-difference checks for every differentiable primitive and the distillation losses.

Each case builds float64 inputs from a seed and returns ``(f, inputs)`` with
``f()`` a scalar. Primitive outputs are contracted with a fixed random tensor
so every output coordinate contributes to the gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import ImageBatch, synthetic_dataset
from .objectives import (
    DistillConfig,
    cross_entropy,
    default_norm_heads,
    info_nce,
    mae_loss,
    multi_teacher_loss,
    single_teacher_loss,
    smooth_l1,
)
from .vit import ViTConfig, init_projector, init_weights

PRIMITIVE_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4
PRIMITIVE_EPS = 1e-6
# deep graphs sum many rounding errors; a step near cbrt(machine eps) balances them against truncation
END_TO_END_EPS = 1e-5

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(rng, *shape, low=None) -> Tensor:
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, low + 1.5, size=shape)
    return Tensor(data, requires_grad=True)


def _unary(op, low=None, shape=(3, 4)) -> Case:
    def build(rng):
        x = _leaf(rng, *shape, low=low)
        with ag.no_grad():
            w = Tensor(rng.standard_normal(op(x).shape))
        return (lambda: ag.sum_(op(x) * w)), [x]
    return build


def _binary(op, shape_a=(3, 4), shape_b=(4,), positive_b=False) -> Case:
    def build(rng):
        a = _leaf(rng, *shape_a)
        b = _leaf(rng, *shape_b, low=0.5 if positive_b else None)
        w = Tensor(rng.standard_normal(np.broadcast_shapes(shape_a, shape_b)))
        return (lambda: ag.sum_(op(a, b) * w)), [a, b]
    return build


def _away_from_zero(rng, *shape) -> Tensor:
    data = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(data, requires_grad=True)


def _kinked(op) -> Case:
    def build(rng):
        x = _away_from_zero(rng, 3, 4)
        w = Tensor(rng.standard_normal((3, 4)))
        return (lambda: ag.sum_(op(x) * w)), [x]
    return build


def _where(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    cond = rng.random((3, 4)) > 0.5
    w = Tensor(rng.standard_normal((3, 4)))
    return (lambda: ag.sum_(ag.where(cond, a, b) * w)), [a, b]


def _concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 5)
    w = Tensor(rng.standard_normal((2, 8)))
    return (lambda: ag.sum_(ag.concat([a, b], axis=1) * w)), [a, b]


def _matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    w = Tensor(rng.standard_normal((2, 3, 5)))
    return (lambda: ag.sum_(ag.matmul(a, b) * w)), [a, b]


def _linear(rng):
    x, wt, bias = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    w = Tensor(rng.standard_normal((2, 3, 5)))
    return (lambda: ag.sum_(ag.linear(x, wt, bias) * w)), [x, wt, bias]


def _layer_norm(rng):
    x, gamma, beta = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    w = Tensor(rng.standard_normal((3, 6)))
    return (lambda: ag.sum_(ag.layer_norm(x, gamma, beta) * w)), [x, gamma, beta]


def _gather(rng):
    x = _leaf(rng, 2, 5, 3)
    idx = np.stack([rng.permutation(5)[:3] for _ in range(2)])
    w = Tensor(rng.standard_normal((2, 3, 3)))
    return (lambda: ag.sum_(ag.gather_tokens(x, idx) * w)), [x]


def _embedding(rng):
    table = _leaf(rng, 6, 3)
    ids = rng.integers(0, 6, size=(2, 4))  # repeats exercise accumulation
    w = Tensor(rng.standard_normal((2, 4, 3)))
    return (lambda: ag.sum_(ag.embedding(table, ids) * w)), [table]


def _getitem_fancy(rng):
    x = _leaf(rng, 4, 3)
    idx = np.array([0, 2, 2, 3])
    w = Tensor(rng.standard_normal((4, 3)))
    return (lambda: ag.sum_(x[idx] * w)), [x]


def _smooth_l1(rng):
    pred = _leaf(rng, 4, 6)
    target = Tensor(pred.data + rng.uniform(0.1, 0.9, size=(4, 6)) * rng.choice([-1, 1], size=(4, 6))
                    * rng.choice([0.5, 3.0], size=(4, 6)))
    return (lambda: smooth_l1(pred, target)), [pred]


def _info_nce(rng):
    q, k = _leaf(rng, 4, 5), Tensor(rng.standard_normal((4, 5)))
    return (lambda: info_nce(q, k, 0.2)), [q]


def _mae(rng):
    from .data import sample_mask

    pred = _leaf(rng, 3, 8, 5)
    target = rng.standard_normal((3, 8, 5))
    mask = sample_mask(3, 8, 0.75, int(rng.integers(1 << 30)))
    return (lambda: mae_loss(pred, target, mask)), [pred]


def _cross_entropy(rng):
    logits = _leaf(rng, 5, 4)
    labels = rng.integers(0, 4, size=5)
    return (lambda: cross_entropy(logits, labels)), [logits]


PRIMITIVES: dict[str, Case] = {
    "add": _binary(ag.add),
    "sub": _binary(ag.sub),
    "mul": _binary(ag.mul),
    "div": _binary(ag.div, positive_b=True),
    "neg": _unary(ag.neg),
    "power": _unary(lambda x: ag.power(x, 2.5), low=0.5),
    "exp": _unary(ag.exp),
    "log": _unary(ag.log, low=0.5),
    "sqrt": _unary(ag.sqrt, low=0.5),
    "tanh": _unary(ag.tanh),
    "abs": _kinked(ag.abs_),
    "relu": _kinked(ag.relu),
    "gelu": _unary(ag.gelu),
    "where": _where,
    "sum": _unary(lambda x: ag.sum_(x, axis=1, keepdims=True), shape=(3, 4)),
    "mean": _unary(lambda x: ag.mean(x, axis=0)),
    "reshape": _unary(lambda x: ag.reshape(x, (2, 6))),
    "transpose": _unary(lambda x: ag.transpose(x, (2, 0, 1)), shape=(2, 3, 4)),
    "getitem": _unary(lambda x: x[1:, ::2]),
    "getitem_fancy": _getitem_fancy,
    "concat": _concat,
    "broadcast_to": _unary(lambda x: ag.broadcast_to(x, (2, 3, 4))),
    "matmul": _matmul,
    "linear": _linear,
    "softmax": _unary(lambda x: ag.softmax(x, axis=-1)),
    "log_softmax": _unary(lambda x: ag.log_softmax(x, axis=0)),
    "layer_norm": _layer_norm,
    "gather_tokens": _gather,
    "embedding": _embedding,
    "smooth_l1": _smooth_l1,
    "info_nce": _info_nce,
    "mae_loss": _mae,
    "cross_entropy": _cross_entropy,
}

_GC_VIT = ViTConfig(image_size=8, patch_size=4, depth=1, heads=2, dim=8, decoder_depth=1, decoder_dim=8,
                    decoder_heads=2)
_GC_TEACHER = _GC_VIT.replace(dim=12, heads=3)


def _distill(mode: str) -> Case:
    def build(rng):
        seed = int(rng.integers(1 << 30))
        teachers = {
            "mae": init_weights(_GC_TEACHER, seed + 1, role="teacher_mae"),
            "moco": init_weights(_GC_TEACHER, seed + 2, role="teacher_moco"),
        }
        student = init_weights(_GC_VIT, seed)
        projectors = {name: init_projector(8, 12, seed + 3 + i) for i, name in enumerate(teachers)}
        # larger projector weights keep the residuals inside the quadratic and linear pieces alike
        for p in projectors.values():
            p.weight.data *= 50.0
        heads = default_norm_heads(teachers["mae"], teachers["moco"])
        data = synthetic_dataset(4, 2, seed, image_size=8, jitter=1)
        batch: ImageBatch = data.batch(np.arange(4))
        config = DistillConfig(mode=mode, mask_ratio=0.5)
        step_seed = seed + 7
        if mode == "multi":
            def f():
                return multi_teacher_loss(teachers["mae"], teachers["moco"], student, projectors, heads, batch,
                                          config, step_seed)[0]
        else:
            name = "mae" if mode == "mae_to_moco" else "moco"

            def f():
                return single_teacher_loss(teachers[name], student, projectors[name], heads[name], batch, config,
                                           step_seed)[0]
        inputs = student.parameters() + [t for p in projectors.values() for t in p.parameters()]
        return f, inputs
    return build


END_TO_END: dict[str, Case] = {f"distill_{m}": _distill(m) for m in ("mae_to_moco", "moco_to_mae", "multi")}


@dataclass
class CaseResult:
    name: str
    seed: int
    report: ag.GradCheckReport


def run_case(name: str, seed: int, n_samples: int | None = None) -> CaseResult:
    build = PRIMITIVES.get(name) or END_TO_END[name]
    primitive = name in PRIMITIVES
    tolerance = PRIMITIVE_TOLERANCE if primitive else END_TO_END_TOLERANCE
    eps = PRIMITIVE_EPS if primitive else END_TO_END_EPS
    rng = np.random.default_rng(seed)
    with ag.default_dtype(np.float64):
        f, inputs = build(rng)
        report = ag.grad_check(f, inputs, eps=eps, tolerance=tolerance, n_samples=n_samples, rng=rng)
    return CaseResult(name, seed, report)


def run_suite(seeds=range(20), end_to_end_samples: int = 60) -> list[CaseResult]:
    results = []
    for seed in seeds:
        for name in PRIMITIVES:
            results.append(run_case(name, seed))
        for name in END_TO_END:
            results.append(run_case(name, seed, end_to_end_samples))
    return results
