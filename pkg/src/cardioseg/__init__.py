"""Compositional cardiac segmentation with metadata conditioning.

The commonly used entry points are re-exported here; see the submodules for
the full surface (metadata codec, CMFI block, network, losses, metrics,
synthetic data, training, inference, CLI).
"""

from .cmfi import CrossModalFeatureIntegration, cmfi_reference
from .errors import (
    CardioSegError,
    CheckpointMismatchError,
    ConfigError,
    DecodingError,
    EmptyMaskError,
    EncodingError,
    GenerationError,
    MissingMetadataError,
    SchemaError,
    ShapeError,
    TrainingDivergedError,
)
from .inference import EnsembleResult, Prediction, ensemble_infer, predict
from .losses import LossBreakdown, dice_loss, meta_loss, total_loss
from .metadata import (
    ABSENT,
    MetadataEntitySpec,
    MetadataRecord,
    MetadataSchema,
    builtin_schema,
    decode_head_outputs,
    encode_metadata,
    load_schema,
    save_schema,
)
from .metamlp import MetadataMLP, MetaMlpConfig
from .metrics import MetricRow, dice_score, hausdorff_mm
from .network import CompositionalSegNet, NetConfig, SegmentationOutput
from .synthdata import (
    AugmentParams,
    PhantomSpec,
    Sample,
    augment,
    generate_phantom,
    load_dataset,
    make_dataset,
    make_splits,
    preprocess,
)
from .training import (
    EvalReport,
    TrainConfig,
    TrainResult,
    desk_net_config,
    desk_train_config,
    evaluate,
    evaluate_checkpoint,
    load_checkpoint,
    make_folds,
    run_ablation_grid,
    run_training,
    save_checkpoint,
)
from .viz import overlay

__version__ = "0.1.0"

__all__ = [
    "ABSENT",
    "AugmentParams",
    "CardioSegError",
    "CheckpointMismatchError",
    "CompositionalSegNet",
    "ConfigError",
    "CrossModalFeatureIntegration",
    "DecodingError",
    "EmptyMaskError",
    "EncodingError",
    "EnsembleResult",
    "EvalReport",
    "GenerationError",
    "LossBreakdown",
    "MetaMlpConfig",
    "MetadataEntitySpec",
    "MetadataMLP",
    "MetadataRecord",
    "MetadataSchema",
    "MetricRow",
    "MissingMetadataError",
    "NetConfig",
    "PhantomSpec",
    "Prediction",
    "Sample",
    "SchemaError",
    "SegmentationOutput",
    "ShapeError",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "augment",
    "builtin_schema",
    "cmfi_reference",
    "decode_head_outputs",
    "desk_net_config",
    "desk_train_config",
    "dice_loss",
    "dice_score",
    "encode_metadata",
    "ensemble_infer",
    "evaluate",
    "evaluate_checkpoint",
    "generate_phantom",
    "hausdorff_mm",
    "load_checkpoint",
    "load_dataset",
    "load_schema",
    "make_dataset",
    "make_folds",
    "make_splits",
    "meta_loss",
    "overlay",
    "predict",
    "preprocess",
    "run_ablation_grid",
    "run_training",
    "save_checkpoint",
    "save_schema",
    "total_loss",
]
