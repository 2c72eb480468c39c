"""Training orchestration for all four distillation modes.

The student (and, in the contrastive modes, the teacher-to-student
projection) is optimized with AdamW (betas 0.9/0.999, eps 1e-8, decoupled
weight decay) under a per-epoch cosine-annealed learning rate. Teacher
weights are frozen throughout; in ``clip-embed`` mode the teacher is never
even instantiated, the loaded embedding table stands in for it.

Derived seeds: the student initializes from ``seed``, the projection from
``seed + 1``, and a teacher built fresh from a config (no checkpoint) from
``seed + 1000``. Data order is keyed by (seed, epoch).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import torch

from .data import DataConfig, Dataset, DatasetSplits, batch_iterator, preprocess_images
from .embed_cache import EmbeddingCache, load_cache
from .errors import ConfigurationError, NumericError, ValidationError
from .losses import (
    MODES,
    DistillationInputs,
    LossBreakdown,
    LossWeights,
    TeacherProjection,
    distillation_loss,
    identity_targets,
    one_hot_targets,
)
from .model import ModelConfig, ViTEncoder, checkpoint_digest, init_model, load_checkpoint

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def torch_dtype(name: str) -> torch.dtype:
    if name not in _DTYPES:
        raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}, got {name!r}")
    return _DTYPES[name]


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one training run."""

    mode: str
    student: ModelConfig
    teacher: Optional[ModelConfig] = None
    teacher_checkpoint: Optional[str] = None
    cache_path: Optional[str] = None
    expected_teacher_digest: Optional[str] = None
    expected_dataset_digest: Optional[str] = None
    loss_weights: LossWeights = LossWeights(0.5, 0.5)
    epochs: int = 200
    batch_size: int = 64
    base_lr: float = 1e-4
    weight_decay: float = 0.1
    seed: int = 0
    student_image_size: int = 32
    teacher_image_size: int = 224
    kl_temperature: float = 1.0
    clip_scale: float = 1.0
    cache_samples_per_class: int = 100
    dtype: str = "float32"
    run_name: str = "run"
    data: Optional[DataConfig] = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be positive, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.kl_temperature <= 0:
            raise ConfigurationError(f"kl_temperature must be positive, got {self.kl_temperature}")
        torch_dtype(self.dtype)
        if self.student_image_size != self.student.image_size:
            raise ConfigurationError(
                f"student_image_size {self.student_image_size} does not match the "
                f"student model's image_size {self.student.image_size}"
            )
        if self.teacher is not None and self.teacher_image_size != self.teacher.image_size:
            raise ConfigurationError(
                f"teacher_image_size {self.teacher_image_size} does not match the "
                f"teacher model's image_size {self.teacher.image_size}"
            )
        if self.mode in ("regular-kd", "clip-teacher"):
            if self.teacher is None and self.teacher_checkpoint is None:
                raise ConfigurationError(f"mode {self.mode!r} requires a teacher config or checkpoint")
        if self.mode == "clip-embed" and self.cache_path is None:
            raise ConfigurationError("clip-embed mode requires a cache path")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "run_name": self.run_name,
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "weight_decay": self.weight_decay,
            "kl_temperature": self.kl_temperature,
            "clip_scale": self.clip_scale,
            "dtype": self.dtype,
            "student": self.student.to_dict(),
            "teacher": self.teacher.to_dict() if self.teacher else None,
            "teacher_checkpoint": self.teacher_checkpoint,
            "cache_path": self.cache_path,
            "expected_teacher_digest": self.expected_teacher_digest,
            "expected_dataset_digest": self.expected_dataset_digest,
            "student_image_size": self.student_image_size,
            "teacher_image_size": self.teacher_image_size,
            "cache_samples_per_class": self.cache_samples_per_class,
            "loss": {"alpha1": self.loss_weights.alpha1, "alpha2": self.loss_weights.alpha2},
            "data": self.data.to_dict() if self.data else None,
        }


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_ce: float
    loss_kd: Optional[float]
    loss_clip: Optional[float]
    val_accuracy: float
    lr: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss_total": self.loss_total,
            "loss_ce": self.loss_ce,
            "loss_kd": self.loss_kd,
            "loss_clip": self.loss_clip,
            "val_accuracy": self.val_accuracy,
            "lr": self.lr,
        }


@dataclass
class TrainingReport:
    mode: str
    alpha2: float
    config: dict
    epochs: List[EpochRecord] = field(default_factory=list)
    final_accuracy: float = 0.0
    wall_seconds: float = 0.0
    teacher_forward_passes: int = 0
    # trained model handle for checkpointing; never serialized or compared
    student: Optional[ViTEncoder] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "alpha2": self.alpha2,
            "final_accuracy": self.final_accuracy,
            "wall_seconds": self.wall_seconds,
            "teacher_forward_passes": self.teacher_forward_passes,
            "config": self.config,
            "epochs": [r.to_dict() for r in self.epochs],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainingReport":
        return cls(
            mode=payload["mode"],
            alpha2=payload["alpha2"],
            config=payload["config"],
            epochs=[EpochRecord(**r) for r in payload["epochs"]],
            final_accuracy=payload["final_accuracy"],
            wall_seconds=payload["wall_seconds"],
            teacher_forward_passes=payload["teacher_forward_passes"],
        )


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps < 1:
        raise ValidationError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def evaluate(model: ViTEncoder, dataset: Dataset, image_size: Optional[int] = None,
             batch_size: int = 64) -> float:
    """Top-1 accuracy of argmax predictions over the whole dataset."""
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    correct = 0
    with torch.no_grad():
        for batch in batch_iterator(dataset, batch_size, shuffle=False,
                                    image_size=image_size, dtype=model.param_dtype):
            preds = model(batch.images).logits.argmax(dim=1)
            correct += int((preds == batch.labels).sum())
    return correct / len(dataset)


class TrainingRun:
    """Materialized state for one run: models, cache, optimizer."""

    def __init__(
        self,
        config: ExperimentConfig,
        teacher: Optional[ViTEncoder] = None,
        cache: Optional[EmbeddingCache] = None,
    ):
        config.validate()
        self.config = config
        self.dtype = torch_dtype(config.dtype)
        self.student = init_model(config.student, config.seed, self.dtype)
        self.teacher = teacher
        self.cache = cache
        self.projection: Optional[TeacherProjection] = None
        self.table: Optional[torch.Tensor] = None

        if config.mode in ("regular-kd", "clip-teacher") and self.teacher is None:
            if config.teacher_checkpoint:
                self.teacher = load_checkpoint(config.teacher_checkpoint, self.dtype)
            else:
                self.teacher = init_model(config.teacher, config.seed + 1000, self.dtype)
        if self.teacher is not None:
            if self.teacher.config.image_size != config.teacher_image_size:
                raise ConfigurationError(
                    f"teacher expects {self.teacher.config.image_size}px images but the "
                    f"experiment says {config.teacher_image_size}px"
                )
            self.teacher.eval()
            self.teacher.requires_grad_(False)

        if config.mode == "clip-embed":
            if self.cache is None:
                expected_teacher = config.expected_teacher_digest
                if expected_teacher is None and config.teacher_checkpoint:
                    expected_teacher = checkpoint_digest(config.teacher_checkpoint)
                self.cache = load_cache(
                    config.cache_path,
                    expected_teacher_digest=expected_teacher,
                    expected_dataset_digest=config.expected_dataset_digest,
                )
            self.table = torch.from_numpy(self.cache.table).to(self.dtype)

        teacher_dim = None
        if config.mode == "clip-teacher":
            teacher_dim = self.teacher.config.embed_dim
        elif config.mode == "clip-embed":
            teacher_dim = self.cache.teacher_dim
        if teacher_dim is not None:
            self.projection = TeacherProjection(
                config.student.embed_dim, teacher_dim, seed=config.seed + 1, dtype=self.dtype
            )

        groups = [{"params": list(self.student.parameters()), "weight_decay": config.weight_decay}]
        if self.projection is not None:
            # small alignment layer; decaying it would bias it toward zero
            groups.append({"params": list(self.projection.parameters()), "weight_decay": 0.0})
        self.optimizer = torch.optim.AdamW(groups, lr=config.base_lr, betas=(0.9, 0.999), eps=1e-8)

    def _teacher_batch(self, train_data: Dataset, indices) -> torch.Tensor:
        return preprocess_images(
            train_data.images[indices], self.config.teacher_image_size, self.dtype
        )

    def step_inputs(self, train_data: Dataset, batch, student_out) -> Optional[DistillationInputs]:
        mode = self.config.mode
        if mode == "supervised-only":
            return None
        if mode == "regular-kd":
            with torch.no_grad():
                teacher_logits = self.teacher(self._teacher_batch(train_data, batch.indices)).logits
            return DistillationInputs(teacher_logits=teacher_logits.to(self.dtype))
        if mode == "clip-teacher":
            with torch.no_grad():
                teacher_emb = self.teacher(self._teacher_batch(train_data, batch.indices)).cls_embedding
            return DistillationInputs(
                student_embedding=student_out.cls_embedding,
                teacher_embedding=self.projection(teacher_emb.to(self.dtype)),
                targets=identity_targets(batch.labels.shape[0], self.dtype),
            )
        return DistillationInputs(
            student_embedding=student_out.cls_embedding,
            teacher_embedding=self.projection(self.table),
            targets=one_hot_targets(batch.labels, self.table.shape[0]).to(self.dtype),
        )


def _ensure_finite(breakdown: LossBreakdown, epoch: int, batch_index: int) -> None:
    for name, value in (
        ("loss_ce", breakdown.ce),
        ("loss_kd", breakdown.kd),
        ("loss_clip", breakdown.clip),
        ("loss_total", breakdown.total),
    ):
        if value is not None and not bool(torch.isfinite(value)):
            raise NumericError(
                f"{name} became non-finite at epoch {epoch}, batch {batch_index}; aborting"
            )


def train(
    config: ExperimentConfig,
    splits: DatasetSplits,
    teacher: Optional[ViTEncoder] = None,
    cache: Optional[EmbeddingCache] = None,
) -> TrainingReport:
    """Run one experiment end to end and return its report.

    ``teacher`` and ``cache`` may be injected directly (e.g. by tests or the
    CLI); otherwise they are materialized from the config. Deterministic for
    a fixed config: data order, initialization, and optimization consume no
    global random state.
    """
    run = TrainingRun(config, teacher=teacher, cache=cache)
    student, cfg = run.student, run.config
    teacher_calls_before = run.teacher.forward_calls if run.teacher is not None else 0
    report = TrainingReport(mode=cfg.mode, alpha2=cfg.loss_weights.alpha2, config=cfg.to_dict())

    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)
        for group in run.optimizer.param_groups:
            group["lr"] = lr
        sums = {"total": 0.0, "ce": 0.0, "kd": 0.0, "clip": 0.0}
        batches = 0
        for i, batch in enumerate(
            batch_iterator(
                splits.train, cfg.batch_size, shuffle_seed=cfg.seed, epoch=epoch,
                image_size=cfg.student_image_size, dtype=run.dtype,
            )
        ):
            out = student(batch.images)
            aux = run.step_inputs(splits.train, batch, out)
            breakdown = distillation_loss(
                cfg.mode, out.logits, batch.labels, aux, cfg.loss_weights,
                kl_temperature=cfg.kl_temperature, clip_scale=cfg.clip_scale,
            )
            _ensure_finite(breakdown, epoch, i)
            run.optimizer.zero_grad()
            breakdown.total.backward()
            run.optimizer.step()
            scalars = breakdown.scalars()
            sums["total"] += scalars["loss_total"]
            sums["ce"] += scalars["loss_ce"]
            sums["kd"] += scalars["loss_kd"] or 0.0
            sums["clip"] += scalars["loss_clip"] or 0.0
            batches += 1
        val_accuracy = evaluate(student, splits.val, cfg.student_image_size, cfg.batch_size)
        report.epochs.append(
            EpochRecord(
                epoch=epoch,
                loss_total=sums["total"] / batches,
                loss_ce=sums["ce"] / batches,
                loss_kd=sums["kd"] / batches if cfg.mode == "regular-kd" else None,
                loss_clip=sums["clip"] / batches if cfg.mode in ("clip-teacher", "clip-embed") else None,
                val_accuracy=val_accuracy,
                lr=lr,
            )
        )
    report.wall_seconds = time.perf_counter() - start
    report.final_accuracy = report.epochs[-1].val_accuracy
    report.teacher_forward_passes = (
        run.teacher.forward_calls - teacher_calls_before if run.teacher is not None else 0
    )
    report.student = student
    return report


def alpha_sweep(
    base_config: ExperimentConfig,
    alpha2_values: Sequence[float],
    splits: DatasetSplits,
    teacher: Optional[ViTEncoder] = None,
    cache: Optional[EmbeddingCache] = None,
) -> List[TrainingReport]:
    """One full run per distillation weight, sharing seed and data order."""
    reports = []
    for alpha2 in alpha2_values:
        cfg = replace(base_config, loss_weights=LossWeights.from_alpha2(alpha2))
        reports.append(train(cfg, splits, teacher=teacher, cache=cache))
    return reports
