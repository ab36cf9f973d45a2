import math

import numpy as np
import pytest

from moma.autograd import Tensor
from moma.optim import (
    FINETUNE_BETAS,
    FINETUNE_LR,
    PRETRAIN_BETAS,
    PRETRAIN_LR,
    WEIGHT_DECAY,
    AdamW,
    NonFiniteGradientError,
    OptimizerState,
    Schedule,
    adamw_step,
    lr_at,
    scaled_lr,
)


def scalar_adamw(p, grads, lr, b1, b2, eps, wd):
    """Reference trajectory, one scalar, written straight from the update equations."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * wd * p
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


def test_recipe_constants():
    assert PRETRAIN_LR == 1.5e-4 and PRETRAIN_BETAS == (0.9, 0.95) and WEIGHT_DECAY == 0.05
    assert FINETUNE_LR == 1.5e-3 and FINETUNE_BETAS == (0.9, 0.999)
    assert scaled_lr(1.5e-4, 128) == pytest.approx(1.5e-4 / 32)


def test_trajectory_matches_reference():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=20).tolist()
    p = Tensor(np.array([0.7]), dtype=np.float64)
    state = OptimizerState(0.9, 0.95, 1e-8, 0.05)
    ours = []
    for g in grads:
        adamw_step([p], [np.array([g])], state, 1e-2)
        ours.append(float(p.data[0]))
    ref = scalar_adamw(0.7, grads, 1e-2, 0.9, 0.95, 1e-8, 0.05)
    assert max(abs(a - b) for a, b in zip(ours, ref)) <= 1e-10


def test_lr_zero_updates_moments_only():
    p = Tensor(np.array([1.0, 2.0]), dtype=np.float64)
    state = OptimizerState()
    adamw_step([p], [np.array([0.5, -0.5])], state, 0.0)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert np.any(state.exp_avg[0] != 0) and state.step == 1


def test_first_step_is_minus_lr():
    p = Tensor(np.array([3.0]), dtype=np.float64)
    adamw_step([p], [np.array([1.0])], OptimizerState(weight_decay=0.0, eps=0.0), 0.1)
    assert p.data[0] == pytest.approx(2.9, abs=1e-12)


def test_pure_decay():
    p = Tensor(np.array([2.0]), dtype=np.float64)
    adamw_step([p], [np.array([0.0])], OptimizerState(weight_decay=0.1), 0.5)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-12)


def test_non_finite_gradient():
    p = Tensor(np.array([1.0]))
    with pytest.raises(NonFiniteGradientError):
        adamw_step([p], [np.array([np.nan])], OptimizerState(), 0.1)
    assert p.data[0] == 1.0


def test_missing_grad_counts_as_zero():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    assert p.data[0] == 1.0


def test_negative_lr_rejected():
    with pytest.raises(ValueError):
        adamw_step([Tensor([1.0])], [np.zeros(1)], OptimizerState(), -1.0)


def test_schedule_anchors():
    s = Schedule(100, 20, 1e-3, 1e-5)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 20) == 1e-3
    assert lr_at(s, 60) == pytest.approx((1e-3 + 1e-5) / 2, abs=1e-18)
    assert lr_at(s, 100) == pytest.approx(1e-5, abs=1e-18)


def test_schedule_shape():
    s = Schedule(50, 10, 2.0)
    lrs = [lr_at(s, i) for i in range(51)]
    assert all(a < b for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))


@pytest.mark.parametrize("args", [(0, 0, 1.0), (10, 10, 1.0), (10, -1, 1.0)])
def test_schedule_validation(args):
    with pytest.raises(ValueError):
        Schedule(*args)


def test_lr_at_out_of_range():
    with pytest.raises(ValueError):
        lr_at(Schedule(10, 2, 1.0), 11)
