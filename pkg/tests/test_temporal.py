"""Tests for the recurrent memory and the sliding window."""

import pytest
import torch

from tcomplete import OrderingError, SessionError, SizeMismatchError, TemporalState
from tcomplete.exceptions import PreconditionError
from tcomplete.temporal import ShapeMemory, WindowFusion, window_push
from tcomplete.types import RefineConfig, TemporalConfig

TEMPORAL = TemporalConfig(hidden_dim=16)
REFINE = RefineConfig(
    num_out=32,
    controlling_points=8,
    knn=4,
    feature_channels=16,
    ball_radius=0.3,
    ball_cap=4,
    fe_widths=[8, 8, 8],
)


def _cloud(seed: int, n: int = 32) -> torch.Tensor:
    return torch.randn((1, n, 3), generator=torch.Generator().manual_seed(seed)) * 0.3


def test_window_push() -> None:
    """Test the window keeps the most recent frames."""
    state = TemporalState.initial(TEMPORAL)
    for frame in range(1, 5):
        state = window_push(state, _cloud(frame), frame)

    assert state.frames == (2, 3, 4)
    assert len(state.window) == 3
    assert torch.equal(state.window[-1], _cloud(4))
    assert window_push(TemporalState.initial(TEMPORAL), _cloud(0), 1).frames == (1,)
    with pytest.raises(OrderingError):
        window_push(state, _cloud(5), 4)


def test_gru_zero_fixed_point() -> None:
    """Test zero code and state stay at zero with zero biases."""
    memory = ShapeMemory(TEMPORAL)
    with torch.no_grad():
        for name, param in memory.named_parameters():
            if "bias" in name:
                param.zero_()
    state = TemporalState.initial(TEMPORAL, 2)

    fused, new_state = memory.gru_update(torch.zeros((2, 16)), state)
    assert torch.equal(fused, torch.zeros((2, 16)))
    assert torch.equal(new_state.hidden, torch.zeros((2, 2, 16)))


def test_gru_is_pure() -> None:
    """Test the update depends only on its inputs."""
    torch.manual_seed(0)
    memory = ShapeMemory(TEMPORAL)
    code = torch.randn((1, 16))
    state = TemporalState.initial(TEMPORAL)

    first, first_state = memory.gru_update(code, state)
    second, _ = memory.gru_update(code, state)
    assert torch.equal(first, second)
    torch.testing.assert_close(first, first_state.hidden[-1])
    assert torch.equal(state.hidden, torch.zeros((2, 1, 16)))
    with pytest.raises(SizeMismatchError):
        memory.gru_update(torch.zeros((1, 8)), state)


def test_session_bytes() -> None:
    """Test the serialized state has a fixed size and restores every field."""
    empty = TemporalState.initial(TEMPORAL)
    state = empty
    for frame in (3, 7):
        state = window_push(state, _cloud(frame), frame)
    state = TemporalState(
        hidden=torch.randn((2, 1, 16)),
        capacity=state.capacity,
        window=state.window,
        frames=state.frames,
    )

    data = state.to_bytes(32)
    assert len(data) == len(empty.to_bytes(32))
    restored = TemporalState.from_bytes(data)
    assert restored.frames == (3, 7)
    assert restored.last_frame == 7
    assert torch.equal(restored.hidden, state.hidden)
    assert all(torch.equal(a, b) for a, b in zip(restored.window, state.window, strict=True))
    assert TemporalState.from_bytes(empty.to_bytes(32)).last_frame is None


@pytest.mark.parametrize("cut", [1, 10, -4])
def test_session_truncated(cut: int) -> None:
    """Test damaged session blobs raise."""
    data = TemporalState.initial(TEMPORAL).to_bytes(32)

    with pytest.raises(SessionError):
        TemporalState.from_bytes(data[:cut])


def test_session_magic() -> None:
    """Test a foreign blob is rejected."""
    data = TemporalState.initial(TEMPORAL).to_bytes(32)

    with pytest.raises(SessionError):
        TemporalState.from_bytes(b"XXXX" + data[4:])


def test_window_fusion_forced_gate() -> None:
    """Test a gate forced to one passes the fused features through."""
    torch.manual_seed(0)
    fusion = WindowFusion(TEMPORAL, REFINE)
    fusion.se.forced_gate = 1.0
    points = _cloud(1, 16)

    f_refine, f_align = fusion(points, [_cloud(2), _cloud(3)], _cloud(3)[:, :8])
    assert f_refine.shape == (1, 16, 16)
    assert torch.equal(f_refine, f_align)


def test_window_fusion_replicates_current_frame() -> None:
    """Test a short window equals one filled with the current frame."""
    torch.manual_seed(0)
    fusion = WindowFusion(TEMPORAL, REFINE)
    current = _cloud(4)
    points = _cloud(5, 16)
    controlling = current[:, :8]

    single, _ = fusion(points, [current], controlling)
    repeated, _ = fusion(points, [current, current, current], controlling)
    torch.testing.assert_close(single, repeated, atol=1e-6, rtol=0)
    with pytest.raises(PreconditionError):
        fusion(points, [], controlling)
