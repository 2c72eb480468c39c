"""Dataset ingestion, synthetic data generation, preprocessing, batching.

Pixel standardization uses mean 0.5 / std 0.5 per channel after scaling to
[0, 1]; the same constants apply on the teacher and student paths. Bilinear
resizing uses the half-pixel-center convention (source coordinate
``(dst + 0.5) * src/dst - 0.5``, clamped to the image).

The CIFAR-100 binary layout is one 3074-byte record per image: a coarse
label byte, a fine label byte, then 3072 pixel bytes (1024 red, 1024 green,
1024 blue, each a row-major 32x32 plane). Fine labels are used.
"""
from __future__ import annotations

import colorsys
import hashlib
import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigurationError, FormatError, ValidationError

CHANNEL_MEAN = 0.5
CHANNEL_STD = 0.5

CIFAR_RECORD_BYTES = 3074
CIFAR_CLASSES = 100
CIFAR_FILES = {"train": "train.bin", "test": "test.bin"}


@dataclass
class Dataset:
    """Immutable image-classification dataset held fully in memory."""

    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64
    class_count: int
    name: str

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValidationError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if self.images.dtype != np.uint8:
            raise ValidationError(f"images must be uint8, got {self.images.dtype}")
        if len(self.images) != len(self.labels):
            raise ValidationError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValidationError("labels out of range for class_count")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]


@dataclass
class Batch:
    """Standardized float images plus labels and source indices."""

    images: Tensor  # (B, S, S, 3), standardized
    labels: Tensor  # (B,) long
    indices: np.ndarray


def dataset_digest(dataset: Dataset) -> str:
    """SHA-256 over class count, labels, and raw pixel bytes."""
    h = hashlib.sha256()
    h.update(str(dataset.class_count).encode())
    h.update(dataset.labels.tobytes())
    h.update(dataset.images.tobytes())
    return h.hexdigest()


def load_cifar100(directory: str, split: str = "train") -> Dataset:
    """Parse one CIFAR-100 binary split from ``directory``."""
    if split not in CIFAR_FILES:
        raise ValidationError(f"split must be one of {sorted(CIFAR_FILES)}, got {split!r}")
    path = os.path.join(directory, CIFAR_FILES[split])
    if not os.path.isfile(path):
        raise FormatError(f"missing CIFAR-100 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    fine = records[:, 1].astype(np.int64)
    if fine.max() >= CIFAR_CLASSES:
        raise ValidationError(f"{path}: fine label {int(fine.max())} out of range")
    pixels = records[:, 2:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(
        images=np.ascontiguousarray(pixels),
        labels=fine,
        class_count=CIFAR_CLASSES,
        name=f"cifar100-{split}",
    )


def synthetic_dataset(
    num_classes: int,
    per_class: int,
    image_size: int,
    seed: int,
    noise: float = 0.12,
    brightness_jitter: float = 0.0,
) -> Dataset:
    """Class-separable toy dataset: per-class base color plus Gaussian noise.

    Base colors are spread over the hue wheel with alternating brightness so
    small models can beat chance quickly; ``noise`` is the pixel noise std as
    a fraction of the 0-255 range. ``brightness_jitter`` scales each image by
    a factor drawn from U(1 - jitter, 1), a class-preserving nuisance that
    makes generalization from few samples genuinely hard. Fully determined
    by its arguments.
    """
    if num_classes < 1 or per_class < 1 or image_size < 1:
        raise ValidationError("num_classes, per_class, and image_size must be positive")
    if not 0.0 <= brightness_jitter < 1.0:
        raise ValidationError(f"brightness_jitter must lie in [0, 1), got {brightness_jitter}")
    rng = np.random.default_rng(seed)
    palette = np.empty((num_classes, 3), dtype=np.float32)
    for c in range(num_classes):
        value = 0.95 if c % 2 == 0 else 0.55
        palette[c] = colorsys.hsv_to_rgb(c / num_classes, 0.8, value)
    palette *= 255.0
    shape = (per_class, image_size, image_size, 3)
    images = np.empty((num_classes * per_class, image_size, image_size, 3), dtype=np.uint8)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        factors = rng.uniform(1.0 - brightness_jitter, 1.0, size=(per_class, 1, 1, 1))
        block = palette[c] * factors + rng.normal(0.0, noise * 255.0, size=shape)
        sl = slice(c * per_class, (c + 1) * per_class)
        images[sl] = np.clip(block, 0, 255).astype(np.uint8)
        labels[sl] = c
    return Dataset(
        images=images,
        labels=labels,
        class_count=num_classes,
        name=(
            f"synthetic(nc={num_classes},n={per_class},size={image_size},seed={seed},"
            f"noise={noise},jitter={brightness_jitter})"
        ),
    )


def _axis_weights(src: int, dst: int):
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = (pos - lo).astype(np.float32)
    return lo, hi, frac


def _resize_batch(images: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resize of a (B, H, W, C) float32 stack to square ``target_size``."""
    b, h, w, c = images.shape
    if (h, w) == (target_size, target_size):
        return images
    ylo, yhi, yf = _axis_weights(h, target_size)
    xlo, xhi, xf = _axis_weights(w, target_size)
    rows_lo = images[:, ylo]  # (B, T, W, C)
    rows_hi = images[:, yhi]
    yf = yf[None, :, None, None]
    rows = rows_lo * (1.0 - yf) + rows_hi * yf
    cols_lo = rows[:, :, xlo]
    cols_hi = rows[:, :, xhi]
    xf = xf[None, None, :, None]
    return cols_lo * (1.0 - xf) + cols_hi * xf


def resize_bilinear(image: np.ndarray, target_size: int) -> np.ndarray:
    """Resize one image (H x W or H x W x C) to ``target_size`` square, float32."""
    if target_size < 1:
        raise ValidationError(f"target_size must be >= 1, got {target_size}")
    arr = np.asarray(image, dtype=np.float32)
    flat = arr.ndim == 2
    if flat:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValidationError(f"expected a 2-D or 3-D image, got shape {arr.shape}")
    if arr.shape[:2] == (target_size, target_size):
        out = arr.copy()
    else:
        out = _resize_batch(arr[None], target_size)[0]
    return out[:, :, 0] if flat else out


def preprocess_images(
    images_u8: np.ndarray,
    image_size: Optional[int] = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """uint8 (B, H, W, 3) -> resized, standardized float tensor."""
    arr = images_u8.astype(np.float32)
    if image_size is not None and image_size != arr.shape[1]:
        arr = _resize_batch(arr, image_size)
    arr = (arr / 255.0 - CHANNEL_MEAN) / CHANNEL_STD
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def batch_iterator(
    dataset: Dataset,
    batch_size: int,
    shuffle_seed: int = 0,
    epoch: int = 0,
    image_size: Optional[int] = None,
    dtype: torch.dtype = torch.float32,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield standardized batches covering the dataset exactly once.

    The order is a deterministic permutation keyed by (shuffle_seed, epoch);
    the final short batch is kept.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(
            images=preprocess_images(dataset.images[idx], image_size, dtype),
            labels=torch.from_numpy(dataset.labels[idx]),
            indices=idx,
        )


@dataclass
class DataConfig:
    """Where training data comes from; consumed by the CLI."""

    source: str = "synthetic"
    num_classes: int = 10
    per_class: int = 50
    val_per_class: int = 20
    image_size: int = 16
    seed: int = 0
    noise: float = 0.12
    brightness_jitter: float = 0.0
    directory: Optional[str] = None

    def __post_init__(self) -> None:
        if self.source not in ("synthetic", "cifar100"):
            raise ConfigurationError(f"unknown data source {self.source!r}")
        if self.source == "cifar100" and not self.directory:
            raise ConfigurationError("cifar100 source requires a directory")

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "num_classes": self.num_classes,
            "per_class": self.per_class,
            "val_per_class": self.val_per_class,
            "image_size": self.image_size,
            "seed": self.seed,
            "noise": self.noise,
            "brightness_jitter": self.brightness_jitter,
            "directory": self.directory,
        }


@dataclass
class DatasetSplits:
    train: Dataset
    val: Dataset


def make_datasets(cfg: DataConfig) -> DatasetSplits:
    """Materialize train/val splits from a data config."""
    if cfg.source == "cifar100":
        return DatasetSplits(
            train=load_cifar100(cfg.directory, "train"),
            val=load_cifar100(cfg.directory, "test"),
        )
    train = synthetic_dataset(cfg.num_classes, cfg.per_class, cfg.image_size, cfg.seed,
                              cfg.noise, cfg.brightness_jitter)
    val = synthetic_dataset(cfg.num_classes, cfg.val_per_class, cfg.image_size, cfg.seed + 1,
                            cfg.noise, cfg.brightness_jitter)
    return DatasetSplits(train=train, val=val)
