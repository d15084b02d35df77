"""Embedding rewiring experiments: active forgetting during pretraining,
embedding-only language adaptation, and zero-shot transfer by parameter
assembly, on a small numpy transformer with its own reverse-mode tape.
"""

from .errors import (
    AssemblyError,
    CheckpointError,
    ConfigError,
    EvaluationError,
    LengthError,
    NumericError,
    PreconditionError,
    ShapeError,
    SizeError,
    VocabError,
)
from .hashing import fnv1a_64, fnv1a_hex
from .tensor import Tape, Tensor, backward
from .model import (
    CLS_ID,
    EMBEDDING_PARAM_NAMES,
    MASK_ID,
    PAD_ID,
    SEP_ID,
    ModelConfig,
    ParamPartition,
    TransformerModel,
    init_params,
)
from .optim import (
    AdamState,
    ForgettingConfig,
    ScheduleSpec,
    StepMetrics,
    TrainState,
    adam_step,
    clip_global_norm,
    default_emb_schedule,
    lr_schedule,
    reset_embedding_group,
    training_step,
)
from .synthdata import (
    DISTANCES,
    ClsDataset,
    ClsExample,
    Corpus,
    LanguageSpec,
    generate_corpus,
    load_corpus,
    make_cls_dataset,
    make_language,
    mlm_mask,
    save_corpus,
    subsample_budget,
)
from .metrics import MetricsLog, MetricsRecord
from .pipeline import (
    Checkpoint,
    FreezeMask,
    Provenance,
    adapt_language,
    adapt_task,
    assemble,
    build_model,
    cls_accuracy,
    evaluate_zero_shot,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    snapshot_model,
)
from .harness import (
    ExperimentPlan,
    MatrixResult,
    ResultRow,
    adaptation_convergence,
    averaged_relative_gain,
    relative_gain,
    render_report,
    run_matrix,
    sweep_adaptation_budget,
    sweep_forgetting_interval,
)

__version__ = "0.1.0"

__all__ = [
    "AssemblyError", "CheckpointError", "ConfigError", "EvaluationError",
    "LengthError", "NumericError", "PreconditionError", "ShapeError",
    "SizeError", "VocabError",
    "fnv1a_64", "fnv1a_hex",
    "Tape", "Tensor", "backward",
    "CLS_ID", "EMBEDDING_PARAM_NAMES", "MASK_ID", "PAD_ID", "SEP_ID",
    "ModelConfig", "ParamPartition", "TransformerModel", "init_params",
    "AdamState", "ForgettingConfig", "ScheduleSpec", "StepMetrics",
    "TrainState", "adam_step", "clip_global_norm", "default_emb_schedule",
    "lr_schedule", "reset_embedding_group", "training_step",
    "DISTANCES", "ClsDataset", "ClsExample", "Corpus", "LanguageSpec",
    "generate_corpus", "load_corpus", "make_cls_dataset", "make_language",
    "mlm_mask", "save_corpus", "subsample_budget",
    "MetricsLog", "MetricsRecord",
    "Checkpoint", "FreezeMask", "Provenance", "adapt_language", "adapt_task",
    "assemble", "build_model", "cls_accuracy", "evaluate_zero_shot",
    "load_checkpoint", "pretrain", "save_checkpoint", "snapshot_model",
    "ExperimentPlan", "MatrixResult", "ResultRow", "adaptation_convergence",
    "averaged_relative_gain", "relative_gain", "render_report", "run_matrix",
    "sweep_adaptation_budget", "sweep_forgetting_interval",
    "__version__",
]
