"""Datasets, augmentation policies and random token masks.

Pixels stay in [0, 1] through augmentation; channel normalisation happens
at the model boundary via :meth:`ImageBatch.normalized`.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
from scipy.ndimage import convolve1d

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD_BYTES = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
CIFAR10_DIR_ENV = "MOMA_CIFAR10_DIR"

# lower bound on the L2 distance between any two class templates, up to 10 classes at 32 px
SYNTHETIC_MARGIN = 4.0


class DatasetError(ValueError):
    pass


def normalize(pixels: np.ndarray, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return (pixels - m) / s


def denormalize(pixels: np.ndarray, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return pixels * s + m


@dataclass
class ImageBatch:
    pixels: np.ndarray
    labels: np.ndarray | None = None
    sample_ids: np.ndarray | None = None
    mean: tuple = CIFAR10_MEAN
    std: tuple = CIFAR10_STD

    def __post_init__(self):
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.pixels))

    def __len__(self) -> int:
        return len(self.pixels)

    def normalized(self, dtype=np.float32) -> np.ndarray:
        return normalize(self.pixels, self.mean, self.std).astype(dtype)

    def with_pixels(self, pixels: np.ndarray) -> "ImageBatch":
        return replace(self, pixels=pixels)


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W], uint8 or float in [0, 1]
    labels: np.ndarray | None
    num_classes: int
    name: str = "dataset"
    mean: tuple = CIFAR10_MEAN
    std: tuple = CIFAR10_STD

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def batch(self, indices) -> ImageBatch:
        indices = np.asarray(indices, dtype=np.int64)
        imgs = self.images[indices]
        pixels = imgs.astype(np.float32) / 255.0 if imgs.dtype == np.uint8 else imgs.astype(np.float32)
        labels = self.labels[indices] if self.labels is not None else None
        return ImageBatch(pixels, labels, indices, self.mean, self.std)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        labels = self.labels[indices] if self.labels is not None else None
        return replace(self, images=self.images[indices], labels=labels)


# -- CIFAR-10 binary -------------------------------------------------------


def _cifar_dir(path: Path) -> Path:
    nested = path / "cifar-10-batches-bin"
    return nested if nested.is_dir() else path


def load_cifar10(path, split: str = "train") -> Dataset:
    """Read the CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = _cifar_dir(Path(path))
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    images, labels = [], []
    for name in files:
        fp = root / name
        if not fp.is_file():
            raise FileNotFoundError(f"missing CIFAR-10 file {fp}")
        raw = np.fromfile(fp, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
            raise DatasetError(f"{fp}: {raw.size} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records")
        records = raw.reshape(-1, CIFAR_RECORD_BYTES)
        lab = records[:, 0]
        if lab.max() >= 10:
            bad = int(np.argmax(lab >= 10))
            raise DatasetError(f"{fp}: record {bad} has label byte {lab[bad]} >= 10")
        labels.append(lab.astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(np.concatenate(images), np.concatenate(labels), 10, f"cifar10-{split}")


def cifar10_dir_from_env() -> Path | None:
    value = os.environ.get(CIFAR10_DIR_ENV)
    return Path(value) if value else None


# -- synthetic data --------------------------------------------------------


def _class_color(c: int, classes: int) -> np.ndarray:
    hue = c / classes
    k = (np.array([5.0, 3.0, 1.0]) + hue * 6.0) % 6.0
    return 0.9 - 0.75 * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def synthetic_templates(classes: int, image_size: int = 32) -> np.ndarray:
    """Noise-free class templates: a coloured Gaussian blob on grey, one position per class."""
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64) / image_size
    sigma = 0.16
    out = np.empty((classes, 3, image_size, image_size))
    for c in range(classes):
        angle = 2 * math.pi * c / classes
        cy, cx = 0.5 + 0.25 * math.sin(angle), 0.5 + 0.25 * math.cos(angle)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        color = _class_color(c, classes)
        out[c] = 0.5 + blob[None] * (color[:, None, None] - 0.5)
    return out


def synthetic_dataset(
    n: int,
    classes: int = 2,
    seed: int = 0,
    image_size: int = 32,
    noise: float = 0.05,
    jitter: int = 2,
) -> Dataset:
    """Class-coloured blobs plus pixel noise; sample i has label i % classes."""
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    templates = synthetic_templates(classes, image_size)
    labels = np.arange(n, dtype=np.int64) % classes
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    for i, c in enumerate(labels):
        dy, dx = rng.integers(-jitter, jitter + 1, size=2) if jitter else (0, 0)
        img = np.roll(templates[c], (int(dy), int(dx)), axis=(1, 2))
        img = img + noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes, f"synthetic-{classes}")


def build_dataset(spec: dict, split: str = "train") -> Dataset:
    """Dataset from a ``[data]`` config section."""
    kind = spec.get("kind", "synthetic")
    if kind == "cifar10":
        path = spec.get("path") or cifar10_dir_from_env()
        if not path:
            raise FileNotFoundError("cifar10 data needs data.path or MOMA_CIFAR10_DIR")
        ds = load_cifar10(path, split)
        limit = spec.get("train_limit" if split == "train" else "test_limit", 0)
        return ds.subset(np.arange(limit)) if limit else ds
    if kind == "synthetic":
        n = spec.get("n_train", 512) if split == "train" else spec.get("n_test", 256)
        seed = spec.get("seed", 0) + (0 if split == "train" else 1_000_003)
        return synthetic_dataset(
            n, spec.get("classes", 2), seed, spec.get("image_size", 32), spec.get("noise", 0.05), spec.get("jitter", 2)
        )
    raise ValueError(f"unknown dataset kind {kind!r}")


# -- batching --------------------------------------------------------------


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch, 0xDA7A]).permutation(n)


def iter_batches(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True, drop_last: bool = False):
    order = epoch_order(n, seed, epoch, shuffle)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield idx


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def prefetch(jobs: Iterable[Callable[[], object]], workers: int = 0, depth: int = 4) -> Iterator:
    """Run batch-preparation callables ahead of the consumer, yielding in submission order."""
    if workers <= 0:
        for job in jobs:
            yield job()
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        for job in jobs:
            pending.append(pool.submit(job))
            if len(pending) >= depth:
                yield pending.pop(0).result()
        for fut in pending:
            yield fut.result()


# -- augmentation ----------------------------------------------------------


@dataclass(frozen=True)
class AugPolicy:
    kind: str = "standard"
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.0
    jitter_strength: float = 0.4
    gray_p: float = 0.0
    blur_p: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_p: float = 0.0
    solarize_threshold: float = 0.5

    def __post_init__(self):
        for name in ("flip_p", "jitter_p", "gray_p", "blur_p", "solarize_p"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale {self.crop_scale} must satisfy 0 < lo <= hi <= 1")
        if self.blur_sigma[0] <= 0 or self.blur_sigma[0] > self.blur_sigma[1]:
            raise ValueError(f"bad blur_sigma {self.blur_sigma}")

    @classmethod
    def standard(cls) -> "AugPolicy":
        return cls("standard")

    @classmethod
    def strong(cls) -> "AugPolicy":
        return cls("strong", jitter_p=0.8, gray_p=0.2, blur_p=0.5, solarize_p=0.2)

    @classmethod
    def identity(cls) -> "AugPolicy":
        return cls("identity", crop_scale=(1.0, 1.0), flip_p=0.0)

    def photometric_only(self) -> "AugPolicy":
        return replace(self, crop_scale=(1.0, 1.0), flip_p=0.0)


def _crop_box(rng: np.random.Generator, h: int, w: int, scale, ratio) -> tuple[int, int, int, int]:
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _bilinear_axis(n_in: int, n_out: int, start: int, length: int):
    pos = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    pos = np.clip(pos, start, start + length - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resized_crop(img: np.ndarray, top: int, left: int, ch: int, cw: int, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of img[:, top:top+ch, left:left+cw] to (out_h, out_w)."""
    h, w = img.shape[1:]
    y0, y1, fy = _bilinear_axis(h, out_h, top, ch)
    x0, x1, fx = _bilinear_axis(w, out_w, left, cw)
    rows = img[:, y0] * (1 - fy)[None, :, None] + img[:, y1] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]


def grayscale(img: np.ndarray) -> np.ndarray:
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.repeat(lum[None], 3, axis=0)


_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def color_jitter(img: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Brightness, contrast, saturation (factors in [1-s, 1+s]) then hue rotation of up to s/4 turns."""
    b, c, s = rng.uniform(max(0.0, 1 - strength), 1 + strength, size=3)
    hue = rng.uniform(-strength / 4, strength / 4)
    img = np.clip(img * b, 0, 1)
    img = np.clip((img - grayscale(img)[0].mean()) * c + grayscale(img)[0].mean(), 0, 1)
    gray = grayscale(img)
    img = np.clip(gray + (img - gray) * s, 0, 1)
    theta = 2 * math.pi * hue
    rot = np.array([[1, 0, 0], [0, math.cos(theta), -math.sin(theta)], [0, math.sin(theta), math.cos(theta)]])
    mat = _YIQ2RGB @ rot @ _RGB2YIQ
    return np.clip(np.einsum("ij,jhw->ihw", mat, img), 0, 1)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(2 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2 * sigma * sigma))
    kernel /= kernel.sum()
    out = convolve1d(img, kernel, axis=1, mode="reflect")
    return convolve1d(out, kernel, axis=2, mode="reflect")


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img)


def augment_image(img: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[1:]
    if policy.crop_scale != (1.0, 1.0):
        top, left, ch, cw = _crop_box(rng, h, w, policy.crop_scale, policy.crop_ratio)
        img = resized_crop(img, top, left, ch, cw, h, w)
    if rng.random() < policy.flip_p:
        img = img[:, :, ::-1]
    if rng.random() < policy.jitter_p:
        img = color_jitter(img, rng, policy.jitter_strength)
    if rng.random() < policy.gray_p:
        img = grayscale(img)
    if rng.random() < policy.blur_p:
        img = gaussian_blur(img, rng.uniform(*policy.blur_sigma))
    if rng.random() < policy.solarize_p:
        img = solarize(img, policy.solarize_threshold)
    return img


def augment(batch: ImageBatch, policy: AugPolicy, seed: int) -> ImageBatch:
    """Apply ``policy`` to every sample; sample i draws from stream (seed, i)."""
    out = np.empty_like(batch.pixels)
    for i, img in enumerate(batch.pixels):
        rng = np.random.default_rng([seed, i])
        out[i] = augment_image(img.astype(np.float64), policy, rng)
    return batch.with_pixels(out)


# -- masking ---------------------------------------------------------------


def visible_count(token_count: int, mask_ratio: float) -> int:
    """round((1 - r) * N), halves rounded up."""
    return int(math.floor((1.0 - mask_ratio) * token_count + 0.5))


@dataclass
class MaskSpec:
    token_count: int
    mask_ratio: float
    visible_indices: np.ndarray  # [B, V], each row sorted
    masked_indices: np.ndarray  # [B, N - V], each row sorted
    meta: dict = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return len(self.visible_indices)

    @property
    def visible_count(self) -> int:
        return self.visible_indices.shape[1]

    @property
    def masked_count(self) -> int:
        return self.masked_indices.shape[1]

    def boolean(self) -> np.ndarray:
        """[B, N] array, True where a token is masked."""
        out = np.ones((self.batch_size, self.token_count), dtype=bool)
        np.put_along_axis(out, self.visible_indices, False, axis=1)
        return out


def sample_mask(batch_size: int, token_count: int, mask_ratio: float, seed) -> MaskSpec:
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError(f"mask_ratio {mask_ratio} outside [0, 1)")
    v = visible_count(token_count, mask_ratio)
    if v < 1:
        raise ValueError(f"mask_ratio {mask_ratio} leaves no visible token out of {token_count}")
    rng = np.random.default_rng(seed)
    noise = rng.random((batch_size, token_count))
    order = np.argsort(noise, axis=1, kind="stable")
    visible = np.sort(order[:, :v], axis=1)
    masked = np.sort(order[:, v:], axis=1)
    return MaskSpec(token_count, float(mask_ratio), visible, masked)
