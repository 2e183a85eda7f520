"""Temporally consistent completion of partial point cloud sequences."""

from .const import __version__
from .dataset import SequenceDataset, generate_dataset, load_manifest, load_sequence
from .evaluate import EvalReport, evaluate
from .exceptions import (
    CheckpointError,
    ConfigError,
    DegenerateInputError,
    EmptyInputError,
    InvalidPoseError,
    OrderingError,
    OutputExistsError,
    PointFileError,
    PreconditionError,
    SessionError,
    SizeMismatchError,
    StorageError,
    TcompleteException,
)
from .losses import chamfer, emd, laplacian_loss, per_point_cd
from .pipeline import Checkpoint, StepOutput, TemporalCompletionNet
from .pointfile import read_points, write_points
from .temporal import TemporalState
from .trainer import train_stage, verify_gradients
from .types import (
    DatasetConfig,
    DisturbanceLimits,
    EncoderConfig,
    EvalConfig,
    EvalMode,
    LossWeights,
    PipelineConfig,
    RefineConfig,
    RigidPose,
    ShapeFamily,
    Split,
    Stage,
    TemporalConfig,
    TrainConfig,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "DatasetConfig",
    "DegenerateInputError",
    "DisturbanceLimits",
    "EmptyInputError",
    "EncoderConfig",
    "EvalConfig",
    "EvalMode",
    "EvalReport",
    "InvalidPoseError",
    "LossWeights",
    "OrderingError",
    "OutputExistsError",
    "PipelineConfig",
    "PointFileError",
    "PreconditionError",
    "RefineConfig",
    "RigidPose",
    "SequenceDataset",
    "SessionError",
    "ShapeFamily",
    "SizeMismatchError",
    "Split",
    "Stage",
    "StepOutput",
    "StorageError",
    "TcompleteException",
    "TemporalCompletionNet",
    "TemporalConfig",
    "TemporalState",
    "TrainConfig",
    "__version__",
    "chamfer",
    "emd",
    "evaluate",
    "generate_dataset",
    "laplacian_loss",
    "load_manifest",
    "load_sequence",
    "per_point_cd",
    "read_points",
    "train_stage",
    "verify_gradients",
    "write_points",
]
