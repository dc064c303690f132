"""volnet: 3D convolutional network engine and batch CLI for volumetric binary classification."""

from .data import (
    DataConfig,
    ManifestDataset,
    ManifestEntry,
    Volume,
    load_manifest,
    preprocess_pipeline,
    read_pgm,
    read_vol1,
    stack_slices,
    write_pgm,
    write_vol1,
)
from .ensemble import PredictionSet, fuse, fuse_and_evaluate, read_predictions_csv, write_predictions_csv
from .errors import VolnetError
from .metrics import EvalReport, RocCurve, auc, evaluate, f1_score, roc_curve, youden_threshold
from .regnet3d import RegNet3d, RegNetConfig, build_model
from .tensor import Rng, Tensor, derive_seed, full, he_normal_init, zeros
from .training import (
    Checkpoint,
    LossConfig,
    OptimizerConfig,
    load_checkpoint,
    make_optimizer,
    restore_model,
    restore_training_state,
    run_training,
    save_checkpoint,
    snapshot,
    train_epoch,
    weighted_bce_with_logit,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DataConfig",
    "EvalReport",
    "LossConfig",
    "ManifestDataset",
    "ManifestEntry",
    "OptimizerConfig",
    "PredictionSet",
    "RegNet3d",
    "RegNetConfig",
    "Rng",
    "RocCurve",
    "Tensor",
    "Volume",
    "VolnetError",
    "auc",
    "build_model",
    "derive_seed",
    "evaluate",
    "f1_score",
    "full",
    "fuse",
    "fuse_and_evaluate",
    "he_normal_init",
    "load_checkpoint",
    "load_manifest",
    "make_optimizer",
    "preprocess_pipeline",
    "read_pgm",
    "read_predictions_csv",
    "read_vol1",
    "restore_model",
    "restore_training_state",
    "roc_curve",
    "run_training",
    "save_checkpoint",
    "snapshot",
    "stack_slices",
    "train_epoch",
    "weighted_bce_with_logit",
    "write_pgm",
    "write_predictions_csv",
    "write_vol1",
    "youden_threshold",
    "zeros",
    "__version__",
]
