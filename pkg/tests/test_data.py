import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moma.data import (
    CIFAR_RECORD_BYTES,
    SYNTHETIC_MARGIN,
    AugPolicy,
    DatasetError,
    ImageBatch,
    augment,
    denormalize,
    gaussian_blur,
    grayscale,
    iter_batches,
    load_cifar10,
    normalize,
    prefetch,
    sample_mask,
    solarize,
    synthetic_dataset,
    synthetic_templates,
    visible_count,
)


def write_cifar(root, n_train=3, n_test=2, label=0, fill=0):
    root.mkdir(parents=True, exist_ok=True)
    for i in range(1, 6):
        rec = np.full((n_train, CIFAR_RECORD_BYTES), fill, dtype=np.uint8)
        rec[:, 0] = label
        rec.tofile(root / f"data_batch_{i}.bin")
    rec = np.full((n_test, CIFAR_RECORD_BYTES), fill, dtype=np.uint8)
    rec.tofile(root / "test_batch.bin")
    return root


# CIFAR-10

def test_cifar_all_zero_record(tmp_path):
    ds = load_cifar10(write_cifar(tmp_path / "c"), "train")
    assert len(ds) == 15
    b = ds.batch([0])
    assert b.labels[0] == 0 and np.all(b.pixels == 0.0)


def test_cifar_channel_planes(tmp_path):
    root = tmp_path / "c"
    write_cifar(root)
    rec = np.zeros((1, CIFAR_RECORD_BYTES), dtype=np.uint8)
    rec[0, 0] = 7
    rec[0, 1:1025] = 255  # red plane
    rec[0, 1 + 1024 + 5] = 128  # green plane, row 0 col 5
    rec.tofile(root / "test_batch.bin")
    b = load_cifar10(root, "test").batch([0])
    assert b.labels[0] == 7
    assert np.all(b.pixels[0, 0] == 1.0)
    assert b.pixels[0, 1, 0, 5] == pytest.approx(128 / 255)
    assert b.pixels[0, 2].sum() == 0


def test_cifar_nested_dir_and_reload_identical(tmp_path):
    write_cifar(tmp_path / "cifar-10-batches-bin", fill=9)
    a = load_cifar10(tmp_path, "train")
    b = load_cifar10(tmp_path, "train")
    np.testing.assert_array_equal(a.images, b.images)


def test_cifar_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path, "train")


def test_cifar_truncated(tmp_path):
    root = write_cifar(tmp_path / "c")
    (root / "test_batch.bin").write_bytes(b"\0" * (CIFAR_RECORD_BYTES + 5))
    with pytest.raises(DatasetError):
        load_cifar10(root, "test")


def test_cifar_bad_label(tmp_path):
    root = write_cifar(tmp_path / "c", label=10)
    with pytest.raises(DatasetError, match="label"):
        load_cifar10(root, "train")


# synthetic

def test_synthetic_balance():
    ds = synthetic_dataset(8, 2, 0)
    assert np.bincount(ds.labels).tolist() == [4, 4]


def test_synthetic_deterministic():
    np.testing.assert_array_equal(synthetic_dataset(16, 4, 3).images, synthetic_dataset(16, 4, 3).images)


def test_synthetic_needs_enough_samples():
    with pytest.raises(ValueError):
        synthetic_dataset(2, 3, 0)


@pytest.mark.parametrize("classes", range(2, 11))
def test_synthetic_class_means_separated(classes):
    # independent check: empirical class means of a noisy draw keep the declared margin
    ds = synthetic_dataset(40 * classes, classes, 0, jitter=0)
    means = np.stack([ds.images[ds.labels == c].astype(np.float64).mean(0).ravel() for c in range(classes)])
    dist = np.sqrt(((means[:, None] - means[None]) ** 2).sum(-1))
    assert dist[~np.eye(classes, dtype=bool)].min() >= SYNTHETIC_MARGIN
    templates = synthetic_templates(classes).reshape(classes, -1)
    tdist = np.sqrt(((templates[:, None] - templates[None]) ** 2).sum(-1))
    assert tdist[~np.eye(classes, dtype=bool)].min() >= SYNTHETIC_MARGIN


def test_normalize_round_trip(rng):
    x = rng.random((2, 3, 4, 4))
    np.testing.assert_allclose(denormalize(normalize(x)), x, atol=1e-6)


# batching

def test_iter_batches_cover_once():
    idx = np.concatenate(list(iter_batches(10, 3, 0, 0)))
    assert sorted(idx.tolist()) == list(range(10))


def test_iter_batches_epoch_reshuffles():
    a = np.concatenate(list(iter_batches(50, 10, 0, 0)))
    b = np.concatenate(list(iter_batches(50, 10, 0, 1)))
    assert not np.array_equal(a, b)


def test_prefetch_preserves_order():
    jobs = [(lambda i=i: i * i) for i in range(20)]
    assert list(prefetch(jobs, workers=3, depth=2)) == [i * i for i in range(20)]


# augmentation

def batch(n=4, seed=0):
    return synthetic_dataset(n, 2, seed).batch(np.arange(n))


def test_identity_policy():
    b = batch()
    policy = AugPolicy("identity", crop_scale=(1.0, 1.0), flip_p=0.0)
    np.testing.assert_array_equal(augment(b, policy, 0).pixels, b.pixels)


def test_grayscale_channels_equal(rng):
    g = grayscale(rng.random((3, 8, 8)))
    np.testing.assert_array_equal(g[0], g[1])
    np.testing.assert_array_equal(g[1], g[2])


def test_always_grayscale_policy():
    policy = AugPolicy("x", crop_scale=(1.0, 1.0), flip_p=0.0, gray_p=1.0)
    out = augment(batch(), policy, 1).pixels
    np.testing.assert_allclose(out[:, 0], out[:, 1], atol=1e-6)


def test_solarize_threshold_zero(rng):
    x = rng.random((3, 8, 8))
    out = solarize(x, 0.0)
    np.testing.assert_array_equal(out, 1.0 - x)
    assert out.mean() == pytest.approx(1.0 - x.mean())


def test_flip_only():
    b = batch()
    out = augment(b, AugPolicy("x", crop_scale=(1.0, 1.0), flip_p=1.0), 0).pixels
    np.testing.assert_array_equal(out, b.pixels[:, :, :, ::-1])


def test_blur_preserves_mean_of_constant():
    x = np.full((3, 8, 8), 0.4)
    np.testing.assert_allclose(gaussian_blur(x, 1.3), x, atol=1e-12)


def test_blur_matches_direct_convolution(rng):
    # independent 2-D convolution with reflect padding, kernel radius ceil(2 sigma)
    x = rng.random((1, 9, 9))
    sigma = 0.8
    r = math.ceil(2 * sigma)
    k1 = np.exp(-np.arange(-r, r + 1) ** 2 / (2 * sigma**2))
    k1 /= k1.sum()
    pad = np.pad(x[0], r, mode="symmetric")
    expect = np.array([[(pad[i:i + 2 * r + 1, j:j + 2 * r + 1] * np.outer(k1, k1)).sum() for j in range(9)]
                       for i in range(9)])
    np.testing.assert_allclose(gaussian_blur(x, sigma)[0], expect, atol=1e-12)


@pytest.mark.parametrize("policy", [AugPolicy.standard(), AugPolicy.strong()])
def test_augment_pure_and_in_range(policy):
    b = batch()
    a1, a2 = augment(b, policy, 42).pixels, augment(b, policy, 42).pixels
    np.testing.assert_array_equal(a1, a2)
    assert a1.min() >= 0.0 and a1.max() <= 1.0
    assert not np.array_equal(augment(b, policy, 43).pixels, a1)


def test_policy_defaults():
    s = AugPolicy.strong()
    assert (s.crop_scale, s.flip_p, s.jitter_p, s.jitter_strength, s.gray_p, s.blur_p, s.blur_sigma,
            s.solarize_p, s.solarize_threshold) == ((0.2, 1.0), 0.5, 0.8, 0.4, 0.2, 0.5, (0.1, 2.0), 0.2, 0.5)
    assert AugPolicy.standard().jitter_p == 0.0


@pytest.mark.parametrize("kw", [dict(flip_p=1.5), dict(crop_scale=(0.0, 1.0)), dict(crop_scale=(0.5, 1.2))])
def test_policy_validation(kw):
    with pytest.raises(ValueError):
        AugPolicy(**kw)


# masks

@pytest.mark.parametrize("n,r,v", [(196, 0.75, 49), (64, 0.9, 6), (196, 0.9, 20), (64, 0.0, 64)])
def test_visible_count_examples(n, r, v):
    assert visible_count(n, r) == v


def test_ratio_zero_all_visible():
    m = sample_mask(3, 16, 0.0, 0)
    assert m.visible_indices.tolist() == [list(range(16))] * 3
    assert m.masked_count == 0


def test_mask_errors():
    with pytest.raises(ValueError):
        sample_mask(1, 16, 1.0, 0)
    with pytest.raises(ValueError):
        sample_mask(1, 4, 0.9, 0)  # V = round(0.4) = 0


def test_mask_deterministic_and_independent():
    a, b = sample_mask(4, 64, 0.75, 7), sample_mask(4, 64, 0.75, 7)
    np.testing.assert_array_equal(a.visible_indices, b.visible_indices)
    assert len({tuple(r) for r in a.visible_indices}) == 4


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 80), st.floats(0.0, 0.99), st.integers(0, 2**31))
def test_mask_partition(b, n, r, seed):
    v = visible_count(n, r)
    if v < 1:
        return
    m = sample_mask(b, n, r, seed)
    assert m.visible_count == v
    for vis, hid in zip(m.visible_indices, m.masked_indices):
        assert np.all(np.diff(vis) > 0) and np.all(np.diff(hid) > 0)
        assert sorted(np.concatenate([vis, hid]).tolist()) == list(range(n))
    assert m.boolean().sum() == b * (n - v)


def test_visibility_frequency():
    n, r, trials = 64, 0.75, 10_000
    m = sample_mask(trials, n, r, 11)
    freq = (~m.boolean()).mean(axis=0)
    p = 1 - r
    se = math.sqrt(p * (1 - p) / trials)
    assert np.all(np.abs(freq - p) <= 3 * se)
