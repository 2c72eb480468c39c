"""Knowledge distillation with contrastive embedding alignment.

Students train under one of four objectives: plain supervision, logit KL
distillation, contrastive alignment against per-sample teacher embeddings,
or contrastive alignment against a precomputed class-averaged embedding
table that replaces the teacher entirely during training.
"""
from .data import (
    Batch,
    DataConfig,
    Dataset,
    DatasetSplits,
    batch_iterator,
    dataset_digest,
    load_cifar100,
    make_datasets,
    preprocess_images,
    resize_bilinear,
    synthetic_dataset,
)
from .embed_cache import EmbeddingCache, build_cache, load_cache, sample_per_class, save_cache
from .errors import (
    ConfigurationError,
    DataError,
    EdkdError,
    FormatError,
    NumericError,
    ShapeError,
    StalenessError,
    ValidationError,
)
from .losses import (
    DistillationInputs,
    LossBreakdown,
    LossWeights,
    TeacherProjection,
    clip_loss,
    cross_entropy_rows,
    distillation_loss,
    identity_targets,
    kl_distill_loss,
    one_hot_targets,
    project_teacher,
    row_normalize,
    similarity_logits,
)
from .metrics import (
    ResourceProfile,
    measure_run,
    read_metrics_csv,
    read_report,
    reports_table,
    static_memory_estimate,
    write_report,
)
from .model import (
    EncoderOutput,
    ModelConfig,
    ViTEncoder,
    checkpoint_digest,
    init_model,
    load_checkpoint,
    load_checkpoint_config,
    param_count,
    patchify,
    save_checkpoint,
    weights_digest,
)
from .trainer import (
    EpochRecord,
    ExperimentConfig,
    TrainingReport,
    alpha_sweep,
    cosine_lr,
    evaluate,
    train,
)

__version__ = "0.1.0"
