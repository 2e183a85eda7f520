"""Disturbed scan sequences: assembly, storage, manifests and the training dataset."""

from __future__ import annotations

import asyncio
from dataclasses import dataclass
from functools import partial
import logging
import math
from pathlib import Path
from typing import TYPE_CHECKING, Any

from mashumaro.exceptions import InvalidFieldValue, MissingField
import numpy as np
import orjson
import torch
from torch.utils.data import Dataset

from .const import DEFAULT_NUM_POINTS, VIEWPOINT_RADIUS
from .exceptions import (
    ConfigError,
    InvalidPoseError,
    OutputExistsError,
    SizeMismatchError,
    StorageError,
)
from .geometry import apply_pose, farthest_point_sample, sample_disturbance
from .helpers import derived_rng
from .pointfile import read_pcb, write_pcb
from .render import render_partial
from .shapes import Shape, generate_shape
from .types import (
    DatasetConfig,
    DatasetManifest,
    DisturbanceLimits,
    ManifestEntry,
    RigidPose,
    SequenceRecord,
    ShapeFamily,
    Split,
)

if TYPE_CHECKING:
    from collections.abc import Sequence

_LOGGER = logging.getLogger(__package__)

MANIFEST_NAME = "manifest.json"
SEQUENCE_NAME = "sequence.json"
COMPLETE_NAME = "complete.pcb"
_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def fibonacci_viewpoints(k: int, radius: float = VIEWPOINT_RADIUS) -> np.ndarray:
    """`k` viewpoints spread evenly over a sphere of `radius`."""
    i = np.arange(k) + 0.5
    z = 1.0 - 2.0 * i / k
    ring = np.sqrt(1.0 - z**2)
    theta = _GOLDEN_ANGLE * np.arange(k)
    return radius * np.column_stack([ring * np.cos(theta), ring * np.sin(theta), z])


def resolution_indices(cloud: np.ndarray) -> list[np.ndarray]:
    """Nested indices of the three resolutions N, N/2 and N/4.

    The coarser resolutions are farthest point samples from the point
    nearest the centroid; the N/4 sample is a prefix of the N/2 sample.
    """
    n = cloud.shape[0]
    seed = int(np.argmin(((cloud - cloud.mean(axis=0)) ** 2).sum(-1)))
    half = farthest_point_sample(cloud, max(n // 2, 1), seed_index=seed)
    return [np.arange(n), half, half[: max(n // 4, 1)]]


@dataclass(kw_only=True, eq=False)
class TrainingSequence:
    """Disturbed partial scans of one shape with their ground truth.

    ``frames`` are stored in float32; the aligned ground truth of a frame is
    the exact inverse pose applied to that stored frame.
    """

    shape_id: str
    category: ShapeFamily
    frames: list[np.ndarray]
    poses: list[RigidPose]
    indices: list[list[np.ndarray]]
    gt_complete: np.ndarray

    def __len__(self) -> int:
        """Number of frames."""
        return len(self.frames)

    def aligned(self, k: int) -> np.ndarray:
        """Ground-truth aligned partial of frame `k` at full resolution."""
        return apply_pose(self.frames[k].astype(np.float64), self.poses[k].inverse())

    @property
    def gt_aligned_partials(self) -> list[list[np.ndarray]]:
        """Per frame, the aligned partial at the three resolutions."""
        result = []
        for k in range(len(self.frames)):
            full = self.aligned(k)
            result.append([full[idx] for idx in self.indices[k]])
        return result


def make_sequence(
    shape: Shape,
    k: int,
    limits: DisturbanceLimits,
    rng: np.random.Generator,
    *,
    shape_id: str = "shape",
    category: ShapeFamily = ShapeFamily.BOX_UNION,
    num_points: int = DEFAULT_NUM_POINTS,
    complete_points: int = DEFAULT_NUM_POINTS,
) -> TrainingSequence:
    """Render `k` views of a shape and disturb each one independently.

    Raises
    ------
    SizeMismatchError
        If `k` is below 1.
    """
    if k < 1:
        msg = f"a sequence needs at least one frame, got {k}"
        raise SizeMismatchError(msg)
    frames, poses, indices = [], [], []
    for viewpoint in fibonacci_viewpoints(k):
        partial_scan = render_partial(shape, viewpoint, rng, num_points)
        pose = sample_disturbance(rng, limits)
        frame = apply_pose(partial_scan, pose).astype(np.float32)
        frames.append(frame)
        poses.append(pose)
        indices.append(resolution_indices(frame.astype(np.float64)))
    complete = shape.points[
        rng.choice(shape.points.shape[0], size=complete_points, replace=False)
    ]
    return TrainingSequence(
        shape_id=shape_id,
        category=category,
        frames=frames,
        poses=poses,
        indices=indices,
        gt_complete=complete.astype(np.float32),
    )


def frame_name(k: int) -> str:
    """File name of frame `k` inside a sequence directory."""
    return f"frame_{k}.pcb"


def save_sequence(sequence: TrainingSequence, directory: Path | str) -> list[str]:
    """Write a sequence as point files plus its metadata; returns the file names."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(e.strerror or "cannot create directory", directory) from e
    files = []
    for k, frame in enumerate(sequence.frames):
        write_pcb(directory / frame_name(k), frame)
        files.append(frame_name(k))
    write_pcb(directory / COMPLETE_NAME, sequence.gt_complete)
    record = SequenceRecord(
        shape_id=sequence.shape_id,
        category=sequence.category,
        poses=[pose.to_record() for pose in sequence.poses],
        resolution_indices=[frame_idx[1].tolist() for frame_idx in sequence.indices],
    )
    try:
        (directory / SEQUENCE_NAME).write_bytes(
            orjson.dumps(record.to_dict(), option=orjson.OPT_INDENT_2)
        )
    except OSError as e:
        raise StorageError(e.strerror or "cannot write sequence", directory) from e
    return [*files, COMPLETE_NAME, SEQUENCE_NAME]


def read_sequence(directory: Path | str) -> TrainingSequence:
    """Read a sequence directory written by :func:`save_sequence`.

    Raises
    ------
    StorageError
        If a file is missing, truncated or inconsistent.
    """
    directory = Path(directory)
    path = directory / SEQUENCE_NAME
    try:
        record = SequenceRecord.from_json(path.read_bytes())
    except OSError as e:
        raise StorageError(e.strerror or "cannot read file", path) from e
    except (InvalidFieldValue, MissingField, orjson.JSONDecodeError, ValueError) as e:
        msg = f"invalid sequence metadata: {e}"
        raise StorageError(msg, path) from e
    if len(record.resolution_indices) != len(record.poses):
        msg = "pose and index counts differ"
        raise StorageError(msg, path)
    frames = [read_pcb(directory / frame_name(k)) for k in range(len(record.poses))]
    indices = []
    for frame, half in zip(frames, record.resolution_indices, strict=True):
        half_idx = np.asarray(half, dtype=np.int64)
        if half_idx.size and (half_idx.max() >= frame.shape[0] or half_idx.min() < 0):
            msg = "resolution index out of range"
            raise StorageError(msg, path)
        n = frame.shape[0]
        indices.append([np.arange(n), half_idx, half_idx[: max(n // 4, 1)]])
    try:
        poses = [RigidPose.from_record(p) for p in record.poses]
    except InvalidPoseError as e:
        raise StorageError(str(e), path) from e
    return TrainingSequence(
        shape_id=record.shape_id,
        category=record.category,
        frames=frames,
        poses=poses,
        indices=indices,
        gt_complete=read_pcb(directory / COMPLETE_NAME),
    )


def load_sequence(manifest: DatasetManifest, shape_id: str) -> TrainingSequence:
    """Load one sequence listed in a manifest."""
    entry = manifest.entry(shape_id)
    return read_sequence(Path(manifest.root) / entry.directory)


def manifest_path(root: Path | str, split: Split) -> Path:
    """Location of the manifest of a split."""
    return Path(root) / split / MANIFEST_NAME


def load_manifest(path: Path | str) -> DatasetManifest:
    """Read a dataset manifest.

    Raises
    ------
    StorageError
        If the manifest is missing or malformed.
    """
    path = Path(path)
    try:
        return DatasetManifest.from_json(path.read_bytes())
    except OSError as e:
        raise StorageError(e.strerror or "cannot read manifest", path) from e
    except (
        ConfigError,
        InvalidFieldValue,
        MissingField,
        orjson.JSONDecodeError,
        ValueError,
    ) as e:
        msg = f"invalid manifest: {e}"
        raise StorageError(msg, path) from e


def _build_entry(
    config: DatasetConfig, root: Path, split: Split, family: ShapeFamily, index: int
) -> ManifestEntry:
    split_key = list(Split).index(split)
    family_key = list(ShapeFamily).index(family)
    seed = [config.seed, split_key, family_key, index]
    rng = derived_rng(*seed)
    shape_id = f"{family}-{index:04d}"
    shape = generate_shape(rng, family, config.surface_points)
    sequence = make_sequence(
        shape,
        config.frames,
        config.limits,
        rng,
        shape_id=shape_id,
        category=family,
        num_points=config.points_per_frame,
        complete_points=config.complete_points,
    )
    directory = f"{split}/{shape_id}"
    files = save_sequence(sequence, root / directory)
    return ManifestEntry(
        shape_id=shape_id,
        category=family,
        directory=directory,
        num_frames=config.frames,
        files=files,
        seed=seed,
    )


async def generate_dataset(
    config: DatasetConfig,
    *,
    root: Path | str | None = None,
    splits: Sequence[Split] = tuple(Split),
    force: bool = False,
) -> dict[Split, Path]:
    """Generate every split of a synthetic dataset.

    Shapes are built concurrently in the default executor; each depends only
    on its own derived seed, so the output is identical for a given config.

    Returns
    -------
    dict
        Manifest path per split.

    Raises
    ------
    OutputExistsError
        If a manifest already exists and `force` is not set.
    """
    root = Path(root if root is not None else config.root)
    loop = asyncio.get_running_loop()
    paths = {}
    for split in splits:
        path = manifest_path(root, split)
        if path.exists() and not force:
            msg = f"{path} exists, use force to overwrite"
            raise OutputExistsError(msg)
        jobs = [
            loop.run_in_executor(
                None, partial(_build_entry, config, root, split, family, index)
            )
            for family in config.families
            for index in range(config.shapes_for(split))
        ]
        entries = list(await asyncio.gather(*jobs))
        manifest = DatasetManifest(
            seed=config.seed, split=split, root=str(root), config=config, entries=entries
        )
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(orjson.dumps(manifest.to_dict(), option=orjson.OPT_INDENT_2))
        except OSError as e:
            raise StorageError(e.strerror or "cannot write manifest", path) from e
        _LOGGER.info("Wrote %s manifest with %s sequences to %s", split, len(entries), path)
        paths[split] = path
    return paths


def accumulate_frames(
    frames: Sequence[np.ndarray],
    poses: Sequence[RigidPose],
    num_points: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Register disturbed frames by undoing their poses, merge and resample.

    Returns
    -------
    numpy.ndarray
        A random selection of `num_points` merged points (with repetition only
        if fewer points are available).
    """
    merged = np.concatenate(
        [
            apply_pose(np.asarray(f, dtype=np.float64), pose.inverse())
            for f, pose in zip(frames, poses, strict=True)
        ]
    )
    choice = rng.choice(
        merged.shape[0], size=num_points, replace=merged.shape[0] < num_points
    )
    return merged[choice]


def lift_input(
    cloud: np.ndarray,
    n: int,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """Keep `n` random points and re-select ``size - n`` of them to restore the size.

    Raises
    ------
    SizeMismatchError
        If `n` is not in [1, len(cloud)].
    """
    total = cloud.shape[0]
    size = total if size is None else size
    if not 1 <= n <= min(total, size):
        msg = f"cannot keep {n} of {total} points"
        raise SizeMismatchError(msg)
    keep = rng.choice(total, size=n, replace=False)
    extra = rng.choice(keep, size=size - n, replace=size - n > n)
    return cloud[np.concatenate([keep, extra])]


class SequenceDataset(Dataset[dict[str, torch.Tensor]]):
    """Training samples of consecutive frames from a manifest.

    Each sample draws `frames_per_sample` frames in sequence order and gives
    each drawn frame a fresh disturbance. Both depend only on
    ``(seed, epoch, index)``.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        *,
        frames_per_sample: int = 1,
        limits: DisturbanceLimits | None = None,
        seed: int = 0,
        augment: bool = True,
    ) -> None:
        """Initialize the dataset."""
        self.manifest = manifest
        self.frames_per_sample = frames_per_sample
        self.limits = limits or manifest.config.limits
        self.seed = seed
        self.augment = augment
        self.epoch = 0
        self._cache: dict[int, TrainingSequence] = {}

    def __len__(self) -> int:
        """Number of sequences."""
        return len(self.manifest.entries)

    def set_epoch(self, epoch: int) -> None:
        """Select the epoch whose frames and disturbances are drawn."""
        self.epoch = epoch

    def sequence(self, index: int) -> TrainingSequence:
        """Load (and keep) the sequence at `index`."""
        if index not in self._cache:
            entry = self.manifest.entries[index]
            self._cache[index] = read_sequence(Path(self.manifest.root) / entry.directory)
        return self._cache[index]

    def __getitem__(self, index: int) -> dict[str, Any]:
        """Sample tensors: points, gt_aligned, translation, complete, frames."""
        sequence = self.sequence(index)
        rng = derived_rng(self.seed, self.epoch, index)
        count = len(sequence)
        chosen = np.sort(
            rng.choice(count, size=self.frames_per_sample, replace=count < self.frames_per_sample)
        )
        points, aligned, translations = [], [], []
        for k in chosen:
            gt = sequence.aligned(int(k))
            pose = (
                sample_disturbance(rng, self.limits)
                if self.augment
                else sequence.poses[int(k)]
            )
            points.append(apply_pose(gt, pose).astype(np.float32))
            aligned.append(gt.astype(np.float32))
            translations.append(pose.inverse().translation.astype(np.float32))
        return {
            "points": torch.from_numpy(np.stack(points)),
            "gt_aligned": torch.from_numpy(np.stack(aligned)),
            "translation": torch.from_numpy(np.stack(translations)),
            "complete": torch.from_numpy(np.asarray(sequence.gt_complete, dtype=np.float32)),
            "frames": torch.from_numpy(chosen.astype(np.int64)),
        }
