"""Tests for the refinement network."""

from dataclasses import replace

import pytest
import torch

from tcomplete import EmptyInputError, PipelineConfig, SizeMismatchError, TemporalState
from tcomplete.align_complete import AlignCompleteNet
from tcomplete.exceptions import PreconditionError
from tcomplete.refine import FROM_ALIGNED, FROM_COARSE, GraphConv, RefineNet, build_refine_input
from tcomplete.temporal import window_push


def _cloud(seed: int, n: int = 32) -> torch.Tensor:
    return torch.randn((2, n, 3), generator=torch.Generator().manual_seed(seed)) * 0.3


def test_build_refine_input(config: PipelineConfig) -> None:
    """Test each source contributes half of the merged points."""
    aligned, coarse = _cloud(1), _cloud(2)

    merged = build_refine_input(aligned, coarse, config.refine)
    assert merged.points.shape == (2, 32, 3)
    assert (merged.provenance[:, :16] == FROM_ALIGNED).all()
    assert (merged.provenance[:, 16:] == FROM_COARSE).all()
    for b in range(2):
        idx = merged.source_indices[b]
        assert torch.equal(merged.points[b, :16], aligned[b, idx[:16]])
        assert torch.equal(merged.points[b, 16:], coarse[b, idx[16:]])
    assert merged.controlling_points.shape == (2, 8, 3)
    assert torch.equal(merged.controlling_points, merged.points[:, :8])
    assert merged.graph.node_count == 64


def test_build_refine_input_same_source(config: PipelineConfig) -> None:
    """Test merging a cloud with itself only picks its own points."""
    cloud = _cloud(3)

    merged = build_refine_input(cloud, cloud, config.refine)
    for b in range(2):
        matches = (merged.points[b, :, None, :] == cloud[b, None, :, :]).all(-1)
        assert matches.any(-1).all()


def test_build_refine_input_errors(config: PipelineConfig) -> None:
    """Test sources smaller than the request are rejected."""
    with pytest.raises(SizeMismatchError):
        build_refine_input(_cloud(1, 8), _cloud(2), config.refine)
    with pytest.raises(EmptyInputError):
        build_refine_input(_cloud(1), _cloud(2, 0), config.refine)


def test_identity_deformation_at_init(config: PipelineConfig) -> None:
    """Test the untrained deformer leaves the merged points in place."""
    torch.manual_seed(0)
    refine = RefineNet(config.refine, config.temporal)
    merged = build_refine_input(_cloud(1), _cloud(2), config.refine)
    features = torch.randn((2, 32, 16))

    refined = refine.gcn_deform(replace(merged, features=features))
    assert torch.equal(refined, merged.points)
    with pytest.raises(PreconditionError):
        refine.gcn_deform(merged)


def test_graph_conv_locality() -> None:
    """Test a node only influences its neighbors in one layer."""
    torch.manual_seed(0)
    conv = GraphConv(4, 5)
    # path 0 - 1 - 2 - 3
    edges = torch.tensor([[0, 1, 1, 2, 2, 3], [1, 0, 2, 1, 3, 2]])
    x = torch.randn((4, 4))
    changed = x.clone()
    changed[3] = 0.0

    before, after = conv(x, edges), conv(changed, edges)
    torch.testing.assert_close(before[:2], after[:2])
    assert not torch.equal(before[2:], after[2:])


def test_stage2_forward(config: PipelineConfig) -> None:
    """Test refinement of a first-stage result."""
    torch.manual_seed(0)
    stage1 = AlignCompleteNet(config.encoder)
    refine = RefineNet(config.refine, config.temporal)
    out, _ = stage1.stage1_forward(_cloud(4))
    state = window_push(TemporalState.initial(config.temporal, 2), out.aligned[0], 1)

    refined, merged = refine.stage2_forward(out, state)
    assert refined.shape == (2, 32, 3)
    assert merged.features is not None
    assert merged.features.shape == (2, 32, 16)
    with pytest.raises(PreconditionError):
        refine.stage2_forward(replace(out, coarse=None), state)
