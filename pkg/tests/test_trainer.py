"""Tests for staged training and gradient checks."""

from pathlib import Path

import pytest
import torch
from torch.utils.data import default_collate

from tcomplete import (
    Checkpoint,
    OrderingError,
    SequenceDataset,
    Split,
    Stage,
    TemporalCompletionNet,
    load_manifest,
    train_stage,
    verify_gradients,
)
from tcomplete.dataset import manifest_path
from tcomplete.trainer import LOG_COLUMNS, compute_losses, read_metrics_log, validation_cd
from tcomplete.types import DatasetManifest, LossWeights

from .conftest import tiny_config


@pytest.fixture(name="train_manifest")
def train_split(dataset_root: Path) -> DatasetManifest:
    """Return the training split of the generated dataset."""
    return load_manifest(manifest_path(dataset_root, Split.TRAIN))


@pytest.fixture(name="val_manifest")
def val_split(dataset_root: Path) -> DatasetManifest:
    """Return the validation split of the generated dataset."""
    return load_manifest(manifest_path(dataset_root, Split.VAL))


def _batch(manifest: DatasetManifest, frames: int = 1) -> dict[str, torch.Tensor]:
    dataset = SequenceDataset(manifest, frames_per_sample=frames)
    return default_collate([dataset[0], dataset[1]])


@pytest.mark.parametrize(
    ("stage", "frames", "parts"),
    [
        (Stage.ALIGN, 1, ("emd_align", "huber", "cd_coarse")),
        (Stage.REFINE, 1, ("cd_final", "laplacian")),
        (Stage.TEMPORAL, 3, ("emd_align", "cd_coarse", "cd_final", "consistency")),
    ],
)
def test_compute_losses(
    net: TemporalCompletionNet,
    train_manifest: DatasetManifest,
    stage: Stage,
    frames: int,
    parts: tuple[str, ...],
) -> None:
    """Test each stage scores its own terms and the report recombines."""
    weights = LossWeights()

    loss, report = compute_losses(net, _batch(train_manifest, frames), stage, weights)
    assert loss.ndim == 0
    assert torch.isfinite(loss)
    assert float(loss) == pytest.approx(report.total, rel=1e-5)
    assert report.recombine(weights) == pytest.approx(report.total)
    for name in parts:
        assert getattr(report, name) > 0
    if stage is Stage.REFINE:
        assert report.emd_align == 0.0
        assert report.consistency == 0.0


def test_refine_stage_gradients(net: TemporalCompletionNet, train_manifest: DatasetManifest) -> None:
    """Test the refinement stage leaves the first stage without gradients."""
    net.freeze_for(Stage.REFINE)

    loss, _ = compute_losses(net, _batch(train_manifest), Stage.REFINE, LossWeights())
    loss.backward()
    assert all(p.grad is None for p in net.stage1.parameters())
    assert any(p.grad is not None for p in net.stage2.parameters())


def test_stage_chain(
    tmp_path: Path, train_manifest: DatasetManifest, val_manifest: DatasetManifest
) -> None:
    """Test the three stages run in order and record their completion."""
    align = tmp_path / "align.pt"
    log = tmp_path / "metrics.csv"

    result = train_stage(
        tiny_config(),
        train_manifest,
        checkpoint_out=align,
        log_path=log,
        val_manifest=val_manifest,
    )
    assert result.finished
    assert len(result.reports) == 2
    assert result.checkpoint.header.completed_stages == [Stage.ALIGN]
    assert result.checkpoint.header.progress is None

    rows = read_metrics_log(log)
    assert tuple(rows[0]) == LOG_COLUMNS
    assert [r["step"] for r in rows] == ["1", "2"]
    assert rows[0]["val_cd"] == ""
    assert float(rows[1]["val_cd"]) > 0

    refine = tmp_path / "refine.pt"
    train_stage(
        tiny_config(stage=Stage.REFINE), train_manifest, checkpoint_in=align, checkpoint_out=refine
    )
    final = tmp_path / "temporal.pt"
    result = train_stage(
        tiny_config(stage=Stage.TEMPORAL), train_manifest, checkpoint_in=refine, checkpoint_out=final
    )
    assert Checkpoint.load(final).header.completed_stages == [
        Stage.ALIGN,
        Stage.REFINE,
        Stage.TEMPORAL,
    ]
    assert all(r.consistency > 0 for r in result.reports)


def test_missing_prerequisite(tmp_path: Path, train_manifest: DatasetManifest) -> None:
    """Test a stage refuses to start before its prerequisites."""
    with pytest.raises(OrderingError):
        train_stage(
            tiny_config(stage=Stage.REFINE), train_manifest, checkpoint_out=tmp_path / "x.pt"
        )
    assert not (tmp_path / "x.pt").exists()


def test_resume_matches_uninterrupted(tmp_path: Path, train_manifest: DatasetManifest) -> None:
    """Test an interrupted stage resumes to the same parameters."""
    straight = train_stage(
        tiny_config(), train_manifest, checkpoint_out=tmp_path / "straight.pt"
    )

    resumed_path = tmp_path / "resumed.pt"
    partial = train_stage(
        tiny_config(), train_manifest, checkpoint_out=resumed_path, max_steps=1
    )
    assert not partial.finished
    progress = Checkpoint.load(resumed_path).header.progress
    assert progress is not None
    assert progress.global_step == 1
    assert progress.stage is Stage.ALIGN

    resumed = train_stage(
        tiny_config(),
        train_manifest,
        checkpoint_in=resumed_path,
        checkpoint_out=resumed_path,
    )
    assert resumed.finished
    assert len(resumed.reports) == 1
    for key, value in straight.checkpoint.state_dict.items():
        torch.testing.assert_close(resumed.checkpoint.state_dict[key], value)


def test_validation_cd(net: TemporalCompletionNet, val_manifest: DatasetManifest) -> None:
    """Test validation scores are deterministic."""
    first = validation_cd(net, val_manifest, batch_size=2)

    assert first > 0
    assert validation_cd(net, val_manifest, batch_size=1) == pytest.approx(first)


def test_verify_gradients(net: TemporalCompletionNet, train_manifest: DatasetManifest) -> None:
    """Test analytic and numeric gradients agree on the smooth terms."""
    dataset = SequenceDataset(train_manifest)

    report = verify_gradients(
        net, default_collate([dataset[0]]), checked_points=2, checked_parameters=0
    )
    assert set(report.relative_errors) == {
        "emd_align",
        "huber",
        "cd_coarse",
        "cd_final",
        "laplacian",
        "orthogonality",
        "gru",
    }
    assert report.checked_points == 2
    assert report.checked_parameters == 0
    assert all(0 <= e < float("inf") for e in report.relative_errors.values())
    assert report.relative_errors["gru"] < 1e-4
    assert report.relative_errors["cd_coarse"] < 1e-4
    assert report.max_relative_error >= report.relative_errors["gru"]
    # the caller's network is left untouched
    assert next(net.parameters()).dtype == torch.float32
