"""Tests for the alignment and coarse completion network."""

import pytest
import torch

from tcomplete import PipelineConfig, SizeMismatchError, TemporalState
from tcomplete.align_complete import AlignCompleteNet, FeatureTNet
from tcomplete.exceptions import PreconditionError
from tcomplete.temporal import ShapeMemory


@pytest.fixture(name="stage1")
def align_complete_net(config: PipelineConfig) -> AlignCompleteNet:
    """Return an untrained first stage."""
    torch.manual_seed(0)
    return AlignCompleteNet(config.encoder)


def _points(batch: int = 2) -> torch.Tensor:
    return torch.randn((batch, 32, 3), generator=torch.Generator().manual_seed(1)) * 0.3


def test_shapes(stage1: AlignCompleteNet) -> None:
    """Test resolution sizes and code widths."""
    out, state = stage1.stage1_forward(_points())

    assert state is None
    assert [a.shape[1] for a in out.aligned] == [32, 16, 8]
    assert [c.shape for c in out.codes] == [(2, 16)] * 3
    assert out.shape_code.shape == (2, 16)
    assert out.coarse is not None
    assert out.coarse.shape == (2, 32, 3)
    assert [t.shape for t in out.feature_transforms] == [(2, 8, 8)] * 3


def test_identity_pose_at_init(stage1: AlignCompleteNet) -> None:
    """Test untrained input T-Nets predict the identity pose."""
    points = _points()
    out = stage1.encode(points)

    eye = torch.eye(3).expand(2, 3, 3)
    for rotation, translation in zip(out.rotations, out.translations, strict=True):
        torch.testing.assert_close(rotation, eye)
        assert torch.equal(translation, torch.zeros((2, 3)))
    torch.testing.assert_close(out.aligned[0], points)


def test_feature_tnet_identity_at_init() -> None:
    """Test an untrained feature T-Net returns the identity."""
    tnet = FeatureTNet(8, [8, 16], [16])

    transform = tnet(torch.randn((3, 10, 8)))
    assert torch.equal(transform, torch.eye(8).expand(3, 8, 8))


def test_nested_resolutions(stage1: AlignCompleteNet) -> None:
    """Test the coarsest resolution is a prefix of the middle one."""
    points = _points()
    full, half, quarter = stage1.sample_indices(points)

    assert torch.equal(full[0], torch.arange(32))
    assert torch.equal(quarter, half[:, :8])
    assert half.unique(dim=1).shape[1] == 16


def test_determinism(stage1: AlignCompleteNet) -> None:
    """Test identical inputs give identical outputs."""
    first, _ = stage1.stage1_forward(_points())
    second, _ = stage1.stage1_forward(_points())

    assert torch.equal(first.shape_code, second.shape_code)
    assert first.coarse is not None
    assert second.coarse is not None
    assert torch.equal(first.coarse, second.coarse)
    assert torch.equal(stage1.decode(torch.zeros((1, 16))), stage1.decode(torch.zeros((1, 16))))


def test_memory_fusion(stage1: AlignCompleteNet, config: PipelineConfig) -> None:
    """Test the fused code comes from the memory and advances the state."""
    memory = ShapeMemory(config.temporal)
    state = TemporalState.initial(config.temporal, 2)

    out, new_state = stage1.stage1_forward(_points(), memory, state)
    assert new_state is not None
    assert out.fused_code is not None
    torch.testing.assert_close(out.fused_code, new_state.hidden[-1])
    with pytest.raises(PreconditionError):
        stage1.stage1_forward(_points(), memory)


def test_size_mismatch(stage1: AlignCompleteNet) -> None:
    """Test clouds of the wrong size are rejected."""
    with pytest.raises(SizeMismatchError):
        stage1.encode(torch.zeros((1, 31, 3)))
    with pytest.raises(SizeMismatchError):
        stage1.encode(torch.zeros((32, 3)))


def test_degenerate_prediction_counter(stage1: AlignCompleteNet) -> None:
    """Test degenerate rotations are sanitized and counted."""
    with torch.no_grad():
        stage1.input_tnets[0].output.bias.zero_()

    out = stage1.encode(_points(1))
    assert stage1.degenerate_predictions == 1
    assert torch.isfinite(out.aligned[0]).all()
