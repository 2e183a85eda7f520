"""Typedefs for Tcomplete."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import StrEnum
import os
from pathlib import Path
from typing import Self

from mashumaro.exceptions import InvalidFieldValue, MissingField
from mashumaro.mixins.orjson import DataClassORJSONMixin
import numpy as np
import orjson

from .const import (
    CHECKPOINT_VERSION,
    DEFAULT_NUM_POINTS,
    EVAL_FRAMES,
    EVAL_REPEATS,
    MANIFEST_VERSION,
    ROTATION_TOLERANCE,
    SEED_ENV_VAR,
    SEQUENCE_LENGTH,
    SHAPE_CODE_DIM,
    SURFACE_SAMPLES,
)
from .exceptions import ConfigError, InvalidPoseError


class Stage(StrEnum):
    """Training stages, in the order they have to run."""

    ALIGN = "align"
    REFINE = "refine"
    TEMPORAL = "temporal"

    @property
    def prerequisites(self) -> tuple[Stage, ...]:
        """Stages that must be completed before this one."""
        order = list(Stage)
        return tuple(order[: order.index(self)])


class ShapeFamily(StrEnum):
    """Synthetic shape families, one per evaluation category."""

    BOX_UNION = "box-union"
    ELLIPSOID_UNION = "ellipsoid-union"
    CYLINDER_LAMP = "cylinder-lamp"
    TABLETOP = "tabletop"
    WING_BODY = "wing-body"
    CHAIR = "chair"
    COUCH = "couch"
    CAR_BODY = "car-body"


class Split(StrEnum):
    """Dataset splits."""

    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class EvalMode(StrEnum):
    """Evaluation protocols."""

    PERCAT = "percat"
    TEMPORAL = "temporal"
    CONSISTENCY = "consistency"
    ABLATION = "ablation"
    ALIGNMENT = "alignment"
    INPUT_SWEEP = "input-sweep"


def _require(condition: bool, msg: str) -> None:  # noqa: FBT001
    if not condition:
        raise ConfigError(msg)


@dataclass(kw_only=True)
class DisturbanceLimits(DataClassORJSONMixin):
    """Bounds of the per-axis pose disturbance."""

    max_rot_deg: float = 20.0
    max_trans_m: float = 0.1

    def __post_init__(self) -> None:
        """Validate the limits."""
        _require(self.max_rot_deg >= 0, "max_rot_deg must be non-negative")
        _require(self.max_trans_m >= 0, "max_trans_m must be non-negative")


@dataclass(kw_only=True)
class LossWeights(DataClassORJSONMixin):
    """Weights of the combined training objective."""

    alpha: float = 1.0
    beta: float = 100.0
    gamma: float = 0.1
    lambda_1: float = 1 / 3
    lambda_2: float = 1 / 3
    huber_delta: float = 2.0
    orthogonality: float = 1e-3
    consistency: float = 1.0

    def __post_init__(self) -> None:
        """Validate the weights."""
        for name in (
            "alpha",
            "beta",
            "gamma",
            "lambda_1",
            "lambda_2",
            "orthogonality",
            "consistency",
        ):
            _require(getattr(self, name) >= 0, f"{name} must be non-negative")
        _require(self.huber_delta > 0, "huber_delta must be positive")

    @property
    def resolution_weights(self) -> tuple[float, float, float]:
        """Weights of the three alignment resolutions."""
        return (1.0, self.lambda_1, self.lambda_2)

    def combine[T](
        self,
        *,
        emd_align: T,
        huber: T,
        cd_coarse: T,
        cd_final: T,
        laplacian: T,
        orthogonality: T,
        consistency: T,
    ) -> T:
        """Weighted sum of the objective parts (floats or tensors)."""
        return (
            self.alpha * emd_align
            + huber
            + self.beta * (cd_coarse + cd_final)
            + self.gamma * laplacian
            + self.orthogonality * orthogonality
            + self.beta * self.consistency * consistency
        )  # type: ignore[operator]


@dataclass(kw_only=True)
class EncoderConfig(DataClassORJSONMixin):
    """Shape of the alignment and completion network."""

    num_points: int = DEFAULT_NUM_POINTS
    code_dim: int = SHAPE_CODE_DIM
    feature_channels: int = 256
    point_widths: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 1280])
    num_coarse: int = DEFAULT_NUM_POINTS
    decoder_widths: list[int] = field(default_factory=lambda: [1024, 1024])
    folding_grid: int = 2
    folding_widths: list[int] = field(default_factory=lambda: [512, 512])
    tnet_widths: list[int] = field(default_factory=lambda: [64, 128, 512])
    tnet_fc_widths: list[int] = field(default_factory=lambda: [256, 128])

    def __post_init__(self) -> None:
        """Validate the encoder layout."""
        _require(self.num_points >= 4, "num_points must be at least 4")
        _require(self.num_points % 4 == 0, "num_points must be divisible by 4")
        widths = [
            self.code_dim,
            self.feature_channels,
            self.num_coarse,
            self.folding_grid,
            *self.point_widths,
            *self.decoder_widths,
            *self.folding_widths,
            *self.tnet_widths,
            *self.tnet_fc_widths,
        ]
        _require(all(w >= 1 for w in widths), "all widths must be at least 1")
        _require(
            self.feature_channels in self.point_widths,
            "feature_channels must be one of point_widths",
        )
        _require(
            self.point_widths[-1] == self.code_dim,
            "the last point width must equal code_dim",
        )
        _require(bool(self.tnet_widths), "tnet_widths must not be empty")
        _require(
            self.num_coarse % (self.folding_grid**2) == 0,
            "num_coarse must be divisible by folding_grid squared",
        )

    @property
    def resolution_sizes(self) -> tuple[int, int, int]:
        """Point counts of the three encoder resolutions."""
        return (self.num_points, self.num_points // 2, self.num_points // 4)


@dataclass(kw_only=True)
class TemporalConfig(DataClassORJSONMixin):
    """Recurrent memory and sliding window settings."""

    gru_layers: int = 2
    hidden_dim: int = SHAPE_CODE_DIM
    window: int = 3
    se_reduction: int = 4

    def __post_init__(self) -> None:
        """Validate the temporal settings."""
        _require(self.gru_layers >= 1, "gru_layers must be at least 1")
        _require(self.window >= 1, "window must be at least 1")
        _require(self.se_reduction >= 1, "se_reduction must be at least 1")
        _require(
            self.hidden_dim % self.se_reduction == 0,
            "hidden_dim must be divisible by se_reduction",
        )


@dataclass(kw_only=True)
class RefineConfig(DataClassORJSONMixin):
    """Shape of the refinement network."""

    num_out: int = DEFAULT_NUM_POINTS
    controlling_points: int = 256
    knn: int = 8
    feature_channels: int = 128
    ball_radius: float = 0.1
    ball_cap: int = 16
    fe_widths: list[int] = field(default_factory=lambda: [64, 64, 128])
    gcn_hidden: list[int] = field(default_factory=lambda: [128, 128, 64])
    centered_coordinates: bool = False

    def __post_init__(self) -> None:
        """Validate the refinement layout."""
        _require(self.num_out >= 2, "num_out must be at least 2")
        _require(self.num_out % 2 == 0, "num_out must be even")
        _require(self.controlling_points >= 1, "controlling_points must be >= 1")
        _require(1 <= self.knn < self.num_out, "knn must be in [1, num_out)")
        _require(self.feature_channels >= 1, "feature_channels must be >= 1")
        _require(self.ball_radius > 0, "ball_radius must be positive")
        _require(self.ball_cap >= 1, "ball_cap must be at least 1")
        _require(
            len(self.fe_widths) >= 1 and all(w >= 1 for w in self.fe_widths),
            "fe_widths must be non-empty positive widths",
        )
        _require(all(w >= 1 for w in self.gcn_hidden), "gcn_hidden must be positive")


@dataclass(kw_only=True)
class TrainConfig(DataClassORJSONMixin):
    """Optimization schedule."""

    stage: Stage = Stage.ALIGN
    batch_size: int = 16
    align_epochs: int = 10
    refine_epochs: int = 10
    temporal_epochs: int = 5
    learning_rate: float = 1e-3
    min_learning_rate: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    non_temporal_lr_scale: float = 0.1
    frames_per_sample: int | None = None
    seed: int = 0
    checkpoint_every: int = 0
    num_workers: int = 0

    def __post_init__(self) -> None:
        """Validate the schedule."""
        _require(self.batch_size >= 1, "batch_size must be at least 1")
        _require(self.learning_rate > 0, "learning_rate must be positive")
        _require(
            min(self.align_epochs, self.refine_epochs, self.temporal_epochs) >= 0,
            "epochs must be non-negative",
        )
        _require(self.checkpoint_every >= 0, "checkpoint_every must be >= 0")
        if self.frames_per_sample is not None:
            _require(
                self.frames_per_sample in (1, 3), "frames_per_sample must be 1 or 3"
            )
            _require(
                self.stage is not Stage.TEMPORAL or self.frames_per_sample == 3,
                "the temporal stage requires frames_per_sample = 3",
            )

    @property
    def sample_frames(self) -> int:
        """Frames drawn per training sample."""
        if self.frames_per_sample is not None:
            return self.frames_per_sample
        return 3 if self.stage is Stage.TEMPORAL else 1

    @property
    def epochs(self) -> int:
        """Epoch count of the configured stage."""
        return {
            Stage.ALIGN: self.align_epochs,
            Stage.REFINE: self.refine_epochs,
            Stage.TEMPORAL: self.temporal_epochs,
        }[self.stage]


@dataclass(kw_only=True)
class DatasetConfig(DataClassORJSONMixin):
    """Synthetic dataset generation settings."""

    root: str = "data"
    seed: int = 0
    families: list[ShapeFamily] = field(default_factory=lambda: list(ShapeFamily))
    train_shapes: int = 100
    val_shapes: int = 20
    test_shapes: int = 20
    frames: int = SEQUENCE_LENGTH
    points_per_frame: int = DEFAULT_NUM_POINTS
    complete_points: int = DEFAULT_NUM_POINTS
    surface_points: int = SURFACE_SAMPLES
    limits: DisturbanceLimits = field(default_factory=DisturbanceLimits)

    def __post_init__(self) -> None:
        """Validate the dataset settings."""
        _require(self.frames >= 1, "frames must be at least 1")
        _require(
            min(self.train_shapes, self.val_shapes, self.test_shapes) >= 0,
            "shape counts must be non-negative",
        )
        _require(self.points_per_frame >= 1, "points_per_frame must be >= 1")
        _require(
            self.surface_points >= max(self.complete_points, 1),
            "surface_points must cover complete_points",
        )

    def shapes_for(self, split: Split) -> int:
        """Shapes per family in a split."""
        return {
            Split.TRAIN: self.train_shapes,
            Split.VAL: self.val_shapes,
            Split.TEST: self.test_shapes,
        }[split]


@dataclass(kw_only=True)
class EvalConfig(DataClassORJSONMixin):
    """Evaluation protocol settings."""

    repeats: int = EVAL_REPEATS
    frames: int = EVAL_FRAMES
    consistency_frames: int = 10
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate the protocol settings."""
        _require(self.repeats >= 1, "repeats must be at least 1")
        _require(self.frames >= 1, "frames must be at least 1")
        _require(self.batch_size >= 1, "batch_size must be at least 1")


@dataclass(kw_only=True)
class PipelineConfig(DataClassORJSONMixin):
    """Complete configuration file."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        """Validate settings that span sections."""
        _require(
            self.temporal.hidden_dim == self.encoder.code_dim,
            "temporal.hidden_dim must equal encoder.code_dim",
        )
        _require(
            self.refine.num_out // 2 <= min(self.encoder.num_points, self.encoder.num_coarse),
            "refine.num_out / 2 exceeds the aligned or coarse cloud size",
        )
        _require(
            self.refine.controlling_points <= self.encoder.num_points,
            "refine.controlling_points exceeds encoder.num_points",
        )

    @classmethod
    def from_file(cls, path: Path | str) -> Self:
        """Load a configuration file and apply environment overrides.

        Parameters
        ----------
        path : Path or str
            JSON configuration file. Every key is optional.

        Returns
        -------
        PipelineConfig
            The validated configuration.

        Raises
        ------
        ConfigError
            If the file is missing, is not valid JSON or holds invalid values.
        """
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            msg = f"Cannot read config file {path}: {e.strerror}"
            raise ConfigError(msg) from e
        try:
            config = cls.from_json(data)
        except ConfigError:
            raise
        except (
            InvalidFieldValue,
            MissingField,
            orjson.JSONDecodeError,
            TypeError,
            ValueError,
        ) as e:
            msg = f"Invalid config file {path}: {e}"
            raise ConfigError(msg) from e
        return config.with_env_overrides()

    def with_env_overrides(self) -> Self:
        """Apply the seed override from the environment, if set."""
        if (value := os.environ.get(SEED_ENV_VAR)) is None:
            return self
        try:
            seed = int(value)
        except ValueError as e:
            msg = f"{SEED_ENV_VAR} must be an integer, got {value!r}"
            raise ConfigError(msg) from e
        return replace(
            self,
            dataset=replace(self.dataset, seed=seed),
            train=replace(self.train, seed=seed),
            evaluation=replace(self.evaluation, seed=seed),
        )

    @classmethod
    def full_scale(cls) -> Self:
        """Published training schedule (batch 32, 20 align and 12 temporal epochs)."""
        return cls(
            train=TrainConfig(
                batch_size=32, align_epochs=20, refine_epochs=20, temporal_epochs=12
            )
        )


@dataclass(kw_only=True)
class ManifestEntry:
    """One sequence of a dataset split."""

    shape_id: str
    category: ShapeFamily
    directory: str
    num_frames: int
    files: list[str]
    seed: list[int]


@dataclass(kw_only=True)
class DatasetManifest(DataClassORJSONMixin):
    """Index of the sequences of one dataset split."""

    version: int = MANIFEST_VERSION
    seed: int
    split: Split
    root: str
    config: DatasetConfig
    entries: list[ManifestEntry] = field(default_factory=list)

    def entry(self, shape_id: str) -> ManifestEntry:
        """Look up an entry by shape id."""
        for entry in self.entries:
            if entry.shape_id == shape_id:
                return entry
        msg = f"Unknown shape id {shape_id!r} in {self.split} manifest"
        raise ConfigError(msg)


@dataclass(kw_only=True)
class PoseRecord:
    """Serialized rigid pose."""

    rotation: list[list[float]]
    translation: list[float]


@dataclass(kw_only=True)
class SequenceRecord(DataClassORJSONMixin):
    """Per-sequence metadata stored next to the point files."""

    shape_id: str
    category: ShapeFamily
    poses: list[PoseRecord]
    resolution_indices: list[list[int]]


@dataclass(kw_only=True)
class TrainProgress(DataClassORJSONMixin):
    """Position inside an unfinished training stage."""

    stage: Stage
    epoch: int
    global_step: int
    steps_per_epoch: int


@dataclass(kw_only=True)
class CheckpointHeader(DataClassORJSONMixin):
    """Metadata stored with the network parameters."""

    version: int = CHECKPOINT_VERSION
    encoder: EncoderConfig
    temporal: TemporalConfig
    refine: RefineConfig
    completed_stages: list[Stage] = field(default_factory=list)
    progress: TrainProgress | None = None


@dataclass(kw_only=True)
class LossReport(DataClassORJSONMixin):
    """Parts of the training objective for one sample or batch."""

    emd_align: float = 0.0
    huber: float = 0.0
    cd_coarse: float = 0.0
    cd_final: float = 0.0
    laplacian: float = 0.0
    orthogonality: float = 0.0
    consistency: float = 0.0
    total: float = 0.0

    def recombine(self, weights: LossWeights) -> float:
        """Weighted total of the stored parts."""
        return weights.combine(
            emd_align=self.emd_align,
            huber=self.huber,
            cd_coarse=self.cd_coarse,
            cd_final=self.cd_final,
            laplacian=self.laplacian,
            orthogonality=self.orthogonality,
            consistency=self.consistency,
        )


@dataclass(kw_only=True)
class MetricRow(DataClassORJSONMixin):
    """One value of an evaluation report."""

    method: str
    category: str
    frame_index: int
    metric_name: str
    value: float


@dataclass(kw_only=True)
class GradientReport(DataClassORJSONMixin):
    """Finite-difference check of every loss term."""

    step: float
    checked_points: int
    checked_parameters: int
    relative_errors: dict[str, float] = field(default_factory=dict)
    max_abs_gradient: dict[str, float] = field(default_factory=dict)

    @property
    def max_relative_error(self) -> float:
        """Largest relative error over all terms."""
        return max(self.relative_errors.values(), default=0.0)


@dataclass(frozen=True, kw_only=True)
class RigidPose:
    """Rotation followed by translation, p' = R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        """Validate the rotation."""
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            msg = "RigidPose expects a 3x3 rotation and a 3-vector translation"
            raise InvalidPoseError(msg)
        if not (np.isfinite(rotation).all() and np.isfinite(translation).all()):
            msg = "RigidPose entries must be finite"
            raise InvalidPoseError(msg)
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > ROTATION_TOLERANCE:
            msg = "rotation is not orthonormal"
            raise InvalidPoseError(msg)
        if abs(np.linalg.det(rotation) - 1.0) > ROTATION_TOLERANCE:
            msg = "rotation is not proper (det != 1)"
            raise InvalidPoseError(msg)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> Self:
        """Identity pose."""
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    def inverse(self) -> RigidPose:
        """Pose undoing this one."""
        return RigidPose(
            rotation=self.rotation.T, translation=-(self.rotation.T @ self.translation)
        )

    def compose(self, other: RigidPose) -> RigidPose:
        """Pose applying ``other`` first, then this one."""
        return RigidPose(
            rotation=self.rotation @ other.rotation,
            translation=self.rotation @ other.translation + self.translation,
        )

    def as_matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def to_record(self) -> PoseRecord:
        """Serializable form."""
        return PoseRecord(
            rotation=self.rotation.tolist(), translation=self.translation.tolist()
        )

    @classmethod
    def from_record(cls, record: PoseRecord) -> Self:
        """Rebuild a pose from its serialized form."""
        return cls(
            rotation=np.array(record.rotation, dtype=np.float64),
            translation=np.array(record.translation, dtype=np.float64),
        )


@dataclass(frozen=True, kw_only=True)
class AdjacencyGraph:
    """Symmetric neighborhood graph stored as directed edges (source, target)."""

    node_count: int
    edge_index: np.ndarray

    def neighbors(self, node: int) -> np.ndarray:
        """Sorted neighbor indices of a node."""
        return np.sort(self.edge_index[1, self.edge_index[0] == node])

    def degrees(self) -> np.ndarray:
        """Neighbor count per node."""
        return np.bincount(self.edge_index[0], minlength=self.node_count)

    @property
    def edge_count(self) -> int:
        """Number of directed edges."""
        return int(self.edge_index.shape[1])
