"""Class-averaged teacher embedding table: build, persist, load.

One teacher forward sweep over a few sampled images per class produces a
small table (classes x teacher embed dim) that stands in for the teacher
during training, so no further teacher forward passes are needed.

Cache file format (little-endian)::

    magic    4 bytes  b"EDKC"
    version  u16      currently 1
    classes  u32
    dim      u32      teacher embedding width
    samples  u32      requested samples per class
    seed     u64      sampling seed
    digest   32 bytes teacher (config + weights) SHA-256
    digest   32 bytes dataset SHA-256
    table    classes * dim * f32, row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch

from .data import Dataset, dataset_digest, preprocess_images
from .errors import DataError, FormatError, StalenessError
from .model import ViTEncoder, weights_digest

CACHE_MAGIC = b"EDKC"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHIIIQ32s32s")


@dataclass
class EmbeddingCache:
    """Per-class mean teacher CLS embeddings plus provenance metadata."""

    table: np.ndarray  # (class_count, teacher_dim) float32
    samples_per_class: int
    teacher_digest: str  # SHA-256 hex over teacher config + weights
    dataset_digest: str
    seed: int

    def __post_init__(self) -> None:
        self.table = np.ascontiguousarray(self.table, dtype=np.float32)
        if self.table.ndim != 2:
            raise FormatError(f"cache table must be 2-D, got shape {self.table.shape}")
        if not np.isfinite(self.table).all():
            raise FormatError("cache table contains non-finite entries")
        for name, digest in (("teacher", self.teacher_digest), ("dataset", self.dataset_digest)):
            if len(digest) != 64:
                raise FormatError(f"{name} digest must be 64 hex chars, got {len(digest)}")

    @property
    def class_count(self) -> int:
        return self.table.shape[0]

    @property
    def teacher_dim(self) -> int:
        return self.table.shape[1]


def sample_per_class(dataset: Dataset, n: int, seed: int) -> List[np.ndarray]:
    """Draw up to ``n`` indices per class, uniformly without replacement.

    Classes smaller than ``n`` contribute all their examples, never
    duplicates. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            raise DataError(f"class {c} has no examples to sample from")
        chosen = rng.permutation(members)[: min(n, members.size)]
        picks.append(np.sort(chosen))
    return picks


def float64_twin(teacher: ViTEncoder) -> ViTEncoder:
    """The same weights at float64. CPU f32 matmul kernels round differently
    depending on batch blocking, so f32 embeddings are not chunk-invariant;
    at f64 the blocking noise sits ~9 decimal digits below f32 resolution
    and disappears when the result is cast back down."""
    if teacher.param_dtype == torch.float64:
        return teacher
    twin = ViTEncoder(teacher.config, dtype=torch.float64)
    twin.load_state_dict(teacher.state_dict())
    return twin


def build_cache(
    teacher: ViTEncoder,
    dataset: Dataset,
    n: int,
    seed: int,
    batch_size: int = 32,
) -> EmbeddingCache:
    """Average teacher CLS embeddings over sampled images of each class.

    The teacher runs in inference mode at float64, resized-to on its own
    image_size; per-class sums accumulate sample-by-sample in float64 and
    rows are stored as float32. Together this makes the table independent of
    ``batch_size``, which only sets throughput.
    """
    worker = float64_twin(teacher)
    worker.eval()
    dim = teacher.config.embed_dim
    table = np.empty((dataset.class_count, dim), dtype=np.float32)
    picks = sample_per_class(dataset, n, seed)
    with torch.no_grad():
        for c, indices in enumerate(picks):
            acc = np.zeros(dim, dtype=np.float64)
            for start in range(0, indices.size, batch_size):
                chunk = indices[start : start + batch_size]
                images = preprocess_images(
                    dataset.images[chunk], teacher.config.image_size, torch.float64
                )
                embeddings = worker(images).cls_embedding.cpu().numpy()
                for row in embeddings:
                    acc += row
            table[c] = (acc / indices.size).astype(np.float32)
    if worker is not teacher:
        teacher.forward_calls += worker.forward_calls
    return EmbeddingCache(
        table=table,
        samples_per_class=n,
        teacher_digest=weights_digest(teacher),
        dataset_digest=dataset_digest(dataset),
        seed=seed,
    )


def save_cache(cache: EmbeddingCache, path: str) -> None:
    classes, dim = cache.table.shape
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                CACHE_MAGIC,
                CACHE_VERSION,
                classes,
                dim,
                cache.samples_per_class,
                cache.seed,
                bytes.fromhex(cache.teacher_digest),
                bytes.fromhex(cache.dataset_digest),
            )
        )
        fh.write(np.ascontiguousarray(cache.table).astype("<f4").tobytes())


def load_cache(
    path: str,
    expected_teacher_digest: Optional[str] = None,
    expected_dataset_digest: Optional[str] = None,
) -> EmbeddingCache:
    """Read a cache file, verifying framing and optional provenance digests."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise FormatError(f"{path}: truncated header ({len(header)} bytes)")
        magic, version, classes, dim, samples, seed, t_digest, d_digest = _HEADER.unpack(header)
        if magic != CACHE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != CACHE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        body = fh.read()
    expected_bytes = classes * dim * 4
    if len(body) != expected_bytes:
        raise FormatError(
            f"{path}: table holds {len(body)} bytes, expected {expected_bytes}"
        )
    table = np.frombuffer(body, dtype="<f4").reshape(classes, dim).copy()
    cache = EmbeddingCache(
        table=table,
        samples_per_class=samples,
        teacher_digest=t_digest.hex(),
        dataset_digest=d_digest.hex(),
        seed=seed,
    )
    if expected_teacher_digest is not None and cache.teacher_digest != expected_teacher_digest:
        raise StalenessError(
            f"{path}: cache was built from a different teacher "
            f"({cache.teacher_digest[:12]}... vs expected {expected_teacher_digest[:12]}...)"
        )
    if expected_dataset_digest is not None and cache.dataset_digest != expected_dataset_digest:
        raise StalenessError(
            f"{path}: cache was built from a different dataset "
            f"({cache.dataset_digest[:12]}... vs expected {expected_dataset_digest[:12]}...)"
        )
    return cache
