"""Distillation objectives.

Four training modes share a common shape: a supervised cross-entropy term on
the student logits plus a weighted distillation term,

    total = alpha1 * CE(student_logits, labels) + alpha2 * distill_term

where the distillation term is a temperature-scaled KL divergence between
teacher and student class distributions (``regular-kd``) or a contrastive
loss over row-normalized embedding similarities (``clip-teacher`` /
``clip-embed``). ``supervised-only`` drops the second term entirely.

The contrastive term computes cosine similarities between student CLS
embeddings and (projected) teacher embeddings and applies a row-wise cross
entropy against a 0/1 target matrix: the identity when distilling per-sample
teacher embeddings, a one-hot label encoding when distilling against a
class-averaged embedding table.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
from torch import Tensor, nn

from .errors import ShapeError, ValidationError

DEFAULT_EPS = 1e-8

MODES = ("supervised-only", "regular-kd", "clip-teacher", "clip-embed")


@dataclass(frozen=True)
class LossWeights:
    """Convex weighting of the supervised and distillation terms.

    alpha1 + alpha2 = 1 is enforced; construct via :meth:`from_alpha2` when
    only the distillation weight is known.
    """

    alpha1: float
    alpha2: float

    def __post_init__(self) -> None:
        for name, v in (("alpha1", self.alpha1), ("alpha2", self.alpha2)):
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if abs(self.alpha1 + self.alpha2 - 1.0) > 1e-9:
            raise ValidationError(
                f"alpha1 + alpha2 must equal 1, got {self.alpha1} + {self.alpha2}"
            )

    @classmethod
    def from_alpha2(cls, alpha2: float) -> "LossWeights":
        return cls(alpha1=1.0 - alpha2, alpha2=alpha2)


def row_normalize(embeddings: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Divide each row by max(its L2 norm, eps).

    The guard is applied inside the square root (``sqrt(max(|row|^2, eps^2))``,
    identical by monotonicity) so zero rows stay zero without producing NaN
    in either the forward or backward pass.
    """
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    sq = (embeddings * embeddings).sum(dim=1, keepdim=True)
    return embeddings / sq.clamp(min=eps * eps).sqrt()


def project_teacher(teacher_embeddings: Tensor, w_proj: Tensor) -> Tensor:
    """Map teacher embeddings into the student dimension: ``E @ W^T``."""
    if teacher_embeddings.ndim != 2 or w_proj.ndim != 2:
        raise ShapeError("project_teacher expects 2-D inputs")
    if teacher_embeddings.shape[1] != w_proj.shape[1]:
        raise ShapeError(
            f"teacher embeddings have width {teacher_embeddings.shape[1]} but the "
            f"projection expects {w_proj.shape[1]}"
        )
    return teacher_embeddings @ w_proj.T


def similarity_logits(
    student_embeddings: Tensor,
    teacher_embeddings: Tensor,
    eps: float = DEFAULT_EPS,
    scale: float = 1.0,
) -> Tensor:
    """Pairwise cosine similarities between student and teacher rows.

    Both matrices are row-normalized first, so entries lie in [-1, 1] (times
    ``scale``, which defaults to 1 and exists purely as a study knob).
    """
    if student_embeddings.shape[1] != teacher_embeddings.shape[1]:
        raise ShapeError(
            f"embedding widths differ: {student_embeddings.shape[1]} vs {teacher_embeddings.shape[1]}"
        )
    sims = row_normalize(student_embeddings, eps) @ row_normalize(teacher_embeddings, eps).T
    return sims if scale == 1.0 else sims * scale


def _validate_target_matrix(targets: Tensor, logits: Tensor) -> Tensor:
    if targets.shape != logits.shape:
        raise ShapeError(
            f"targets shape {tuple(targets.shape)} does not match logits {tuple(logits.shape)}"
        )
    is_binary = ((targets == 0) | (targets == 1)).all()
    row_sums = targets.sum(dim=1)
    if not bool(is_binary) or not bool((row_sums == 1).all()):
        raise ValidationError("each target row must contain exactly one 1 and zeros elsewhere")
    return targets.argmax(dim=1)


def cross_entropy_rows(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean over rows of ``-log softmax(row)[target]``.

    The log-sum-exp is computed with max subtraction so large logits stay
    finite. ``targets`` is a 0/1 matrix with exactly one 1 per row.
    """
    index = _validate_target_matrix(targets, logits)
    row_max = logits.max(dim=1, keepdim=True).values
    lse = row_max.squeeze(1) + (logits - row_max).exp().sum(dim=1).log()
    picked = logits.gather(1, index.unsqueeze(1)).squeeze(1)
    return (lse - picked).mean()


def clip_loss(
    student_embeddings: Tensor,
    teacher_embeddings: Tensor,
    targets: Tensor,
    eps: float = DEFAULT_EPS,
    scale: float = 1.0,
) -> Tensor:
    """Row-wise cross entropy over the cosine-similarity matrix."""
    return cross_entropy_rows(similarity_logits(student_embeddings, teacher_embeddings, eps, scale), targets)


def kl_distill_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean KL(teacher || student) over temperature-softened rows, times T^2."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    log_pt = _log_softmax_rows(teacher_logits / temperature)
    log_ps = _log_softmax_rows(student_logits / temperature)
    kl_rows = (log_pt.exp() * (log_pt - log_ps)).sum(dim=1)
    return kl_rows.mean() * (temperature * temperature)


def _log_softmax_rows(x: Tensor) -> Tensor:
    row_max = x.max(dim=1, keepdim=True).values
    shifted = x - row_max
    return shifted - shifted.exp().sum(dim=1, keepdim=True).log()


def one_hot_targets(labels: Union[Tensor, Sequence[int]], num_classes: int) -> Tensor:
    """B x num_classes 0/1 matrix with row i hot at labels[i]."""
    idx = torch.as_tensor(labels, dtype=torch.long)
    if idx.ndim != 1:
        raise ValidationError(f"labels must be a flat index list, got shape {tuple(idx.shape)}")
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= num_classes):
        raise ValidationError(
            f"labels must lie in [0, {num_classes}), got range [{int(idx.min())}, {int(idx.max())}]"
        )
    out = torch.zeros(idx.shape[0], num_classes)
    out[torch.arange(idx.shape[0]), idx] = 1.0
    return out


def identity_targets(batch_size: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """B x B identity: sample i's student row matches sample i's teacher row."""
    return torch.eye(batch_size, dtype=dtype)


class TeacherProjection(nn.Module):
    """Learnable bias-free map from teacher to student embedding width.

    Trained jointly with the student via gradients flowing out of the
    contrastive loss; teacher weights themselves stay frozen.
    """

    def __init__(self, student_dim: int, teacher_dim: int, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        weight = torch.empty(student_dim, teacher_dim)
        gen = torch.Generator().manual_seed(seed)
        nn.init.trunc_normal_(weight, std=0.02, a=-0.04, b=0.04, generator=gen)
        self.weight = nn.Parameter(weight.to(dtype))

    def forward(self, teacher_embeddings: Tensor) -> Tensor:
        return project_teacher(teacher_embeddings, self.weight)


@dataclass
class DistillationInputs:
    """Mode-specific tensors consumed by :func:`distillation_loss`."""

    teacher_logits: Optional[Tensor] = None  # regular-kd
    student_embedding: Optional[Tensor] = None  # clip modes
    teacher_embedding: Optional[Tensor] = None  # clip modes, already projected
    targets: Optional[Tensor] = None  # clip modes


@dataclass
class LossBreakdown:
    """Weighted total plus each component for logging."""

    total: Tensor
    ce: Tensor
    kd: Optional[Tensor] = None
    clip: Optional[Tensor] = None

    def scalars(self) -> dict:
        out = {
            "loss_total": float(self.total.detach()),
            "loss_ce": float(self.ce.detach()),
        }
        out["loss_kd"] = float(self.kd.detach()) if self.kd is not None else None
        out["loss_clip"] = float(self.clip.detach()) if self.clip is not None else None
        return out


def distillation_loss(
    mode: str,
    student_logits: Tensor,
    labels: Union[Tensor, Sequence[int]],
    aux: Optional[DistillationInputs],
    weights: LossWeights,
    kl_temperature: float = 1.0,
    clip_scale: float = 1.0,
    eps: float = DEFAULT_EPS,
) -> LossBreakdown:
    """Combine the supervised CE with the mode's distillation term.

    Component losses are always computed and reported even when their weight
    is zero, so sweeps over the weighting log comparable curves.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; expected one of {MODES}")
    ce = cross_entropy_rows(student_logits, one_hot_targets(labels, student_logits.shape[1]))

    if mode == "supervised-only":
        return LossBreakdown(total=weights.alpha1 * ce, ce=ce)

    if aux is None:
        raise ValidationError(f"mode {mode!r} requires distillation inputs")
    if mode == "regular-kd":
        if aux.teacher_logits is None:
            raise ValidationError("regular-kd requires teacher_logits")
        kd = kl_distill_loss(student_logits, aux.teacher_logits, kl_temperature)
        return LossBreakdown(total=weights.alpha1 * ce + weights.alpha2 * kd, ce=ce, kd=kd)

    missing = [
        name
        for name, value in (
            ("student_embedding", aux.student_embedding),
            ("teacher_embedding", aux.teacher_embedding),
            ("targets", aux.targets),
        )
        if value is None
    ]
    if missing:
        raise ValidationError(f"mode {mode!r} requires {', '.join(missing)}")
    contrastive = clip_loss(aux.student_embedding, aux.teacher_embedding, aux.targets, eps, clip_scale)
    return LossBreakdown(
        total=weights.alpha1 * ce + weights.alpha2 * contrastive, ce=ce, clip=contrastive
    )
