"""Temporal units: recurrent shape-code memory and sliding-window feature fusion."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace
from typing import Self

import numpy as np
import torch
from torch import nn

from .const import SESSION_MAGIC, SESSION_VERSION
from .exceptions import OrderingError, PreconditionError, SessionError, SizeMismatchError
from .geometry import ball_group, gather_points
from .layers import SEGate, point_mlp
from .losses import safe_norm
from .types import RefineConfig, TemporalConfig

_SESSION_HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u4"),
        ("layers", "<u4"),
        ("batch", "<u4"),
        ("hidden", "<u4"),
        ("capacity", "<u4"),
        ("points", "<u4"),
        ("count", "<u4"),
    ]
)


@dataclass(frozen=True, kw_only=True, eq=False)
class TemporalState:
    """Per-stream memory: GRU hidden stack and the window of recent aligned clouds.

    ``window`` holds up to ``capacity`` clouds (B, N, 3), oldest first, and
    ``frames`` their strictly increasing frame indices.
    """

    hidden: torch.Tensor
    capacity: int
    window: tuple[torch.Tensor, ...] = ()
    frames: tuple[int, ...] = ()

    @classmethod
    def initial(
        cls,
        config: TemporalConfig,
        batch_size: int = 1,
        *,
        dtype: torch.dtype = torch.float32,
        device: torch.device | None = None,
    ) -> Self:
        """Zero hidden state and an empty window."""
        hidden = torch.zeros(
            config.gru_layers, batch_size, config.hidden_dim, dtype=dtype, device=device
        )
        return cls(hidden=hidden, capacity=config.window)

    @property
    def last_frame(self) -> int | None:
        """Index of the most recent frame, if any."""
        return self.frames[-1] if self.frames else None

    def to_bytes(self, points_per_frame: int) -> bytes:
        """Serialize to a fixed-size little-endian blob.

        The size depends only on the configuration, never on how many frames
        the stream has seen.
        """
        layers, batch, hidden_dim = self.hidden.shape
        header = np.array(
            [
                (
                    SESSION_MAGIC,
                    SESSION_VERSION,
                    layers,
                    batch,
                    hidden_dim,
                    self.capacity,
                    points_per_frame,
                    len(self.window),
                )
            ],
            dtype=_SESSION_HEADER,
        )
        frames = np.zeros(self.capacity, dtype="<u8")
        frames[: len(self.frames)] = self.frames
        window = np.zeros((self.capacity, batch, points_per_frame, 3), dtype="<f4")
        for slot, cloud in enumerate(self.window):
            if cloud.shape != (batch, points_per_frame, 3):
                msg = f"window cloud has shape {tuple(cloud.shape)}"
                raise SizeMismatchError(msg)
            window[slot] = cloud.detach().cpu().numpy()
        hidden = self.hidden.detach().cpu().numpy().astype("<f4")
        return header.tobytes() + frames.tobytes() + hidden.tobytes() + window.tobytes()

    @classmethod
    def from_bytes(
        cls,
        data: bytes,
        *,
        dtype: torch.dtype = torch.float32,
        device: torch.device | None = None,
    ) -> Self:
        """Rebuild a state from :meth:`to_bytes` output.

        Raises
        ------
        SessionError
            If the blob is truncated, has the wrong magic or an unknown version.
        """
        if len(data) < _SESSION_HEADER.itemsize:
            msg = "truncated session state"
            raise SessionError(msg)
        header = np.frombuffer(data, dtype=_SESSION_HEADER, count=1)[0]
        if header["magic"] != SESSION_MAGIC or header["version"] != SESSION_VERSION:
            msg = "not a session state of a supported version"
            raise SessionError(msg)
        layers, batch, hidden_dim, capacity, points, count = (
            int(header[k])
            for k in ("layers", "batch", "hidden", "capacity", "points", "count")
        )
        sizes = (
            capacity * 8,
            layers * batch * hidden_dim * 4,
            capacity * batch * points * 12,
        )
        if len(data) != _SESSION_HEADER.itemsize + sum(sizes) or count > capacity:
            msg = "session state size does not match its header"
            raise SessionError(msg)
        offset = _SESSION_HEADER.itemsize
        frames = np.frombuffer(data, dtype="<u8", count=capacity, offset=offset)
        offset += sizes[0]
        hidden = np.frombuffer(
            data, dtype="<f4", count=layers * batch * hidden_dim, offset=offset
        ).reshape(layers, batch, hidden_dim)
        offset += sizes[1]
        window = np.frombuffer(
            data, dtype="<f4", count=capacity * batch * points * 3, offset=offset
        ).reshape(capacity, batch, points, 3)
        return cls(
            hidden=torch.tensor(hidden, dtype=dtype, device=device),
            capacity=capacity,
            window=tuple(
                torch.tensor(window[slot], dtype=dtype, device=device)
                for slot in range(count)
            ),
            frames=tuple(int(f) for f in frames[:count]),
        )


def window_push(state: TemporalState, aligned: torch.Tensor, frame: int) -> TemporalState:
    """Append an aligned cloud to the window, evicting the oldest beyond capacity.

    Raises
    ------
    OrderingError
        If `frame` is not larger than the last stored frame index.
    """
    if state.last_frame is not None and frame <= state.last_frame:
        msg = f"frame {frame} arrived after frame {state.last_frame}"
        raise OrderingError(msg)
    return replace(
        state,
        window=(*state.window, aligned)[-state.capacity :],
        frames=(*state.frames, frame)[-state.capacity :],
    )


class ShapeMemory(nn.Module):
    """Stacked GRU over shape codes; the top layer's new hidden is the fused code."""

    def __init__(self, config: TemporalConfig) -> None:
        """Initialize the memory."""
        super().__init__()
        self.config = config
        self.gru = nn.GRU(
            input_size=config.hidden_dim,
            hidden_size=config.hidden_dim,
            num_layers=config.gru_layers,
            batch_first=True,
        )

    def forward(
        self, code: torch.Tensor, state: TemporalState
    ) -> tuple[torch.Tensor, TemporalState]:
        """Alias of :meth:`gru_update`."""
        return self.gru_update(code, state)

    def gru_update(
        self, code: torch.Tensor, state: TemporalState
    ) -> tuple[torch.Tensor, TemporalState]:
        """Feed one shape code (B, H) through the memory.

        Raises
        ------
        SizeMismatchError
            If the code or the hidden stack do not match the configuration.
        """
        expected = (self.config.gru_layers, code.shape[0], self.config.hidden_dim)
        if code.dim() != 2 or code.shape[-1] != self.config.hidden_dim:  # noqa: PLR2004
            msg = f"shape code of shape {tuple(code.shape)}, expected (B, {self.config.hidden_dim})"
            raise SizeMismatchError(msg)
        if tuple(state.hidden.shape) != expected:
            msg = f"hidden state of shape {tuple(state.hidden.shape)}, expected {expected}"
            raise SizeMismatchError(msg)
        output, hidden = self.gru(code.unsqueeze(1), state.hidden)
        return output[:, -1], replace(state, hidden=hidden)


class FeatureExtractor(nn.Module):
    """Shared per-point MLP over ball-grouped offsets, max-pooled per group.

    Input per neighbor q of a center p is (p - q, |p - q|).
    """

    def __init__(self, widths: Sequence[int]) -> None:
        """Initialize the extractor."""
        super().__init__()
        self.mlp = point_mlp([4, *widths])
        self.out_channels = widths[-1]

    def forward(
        self, centers: torch.Tensor, source: torch.Tensor, indices: torch.Tensor
    ) -> torch.Tensor:
        """Features (B, M, C) for centers (B, M, 3) grouped by indices (B, M, K)."""
        offsets = centers.unsqueeze(2) - gather_points(source, indices)
        grouped = torch.cat([offsets, safe_norm(offsets).unsqueeze(-1)], dim=-1)
        return self.mlp(grouped).max(dim=2).values


class WindowFusion(nn.Module):
    """Local temporal fusion over the sliding window of aligned clouds.

    Features of the current frame and of each past frame are concatenated,
    reduced by stacked linear layers and gated channel-wise.
    """

    def __init__(self, temporal: TemporalConfig, refine: RefineConfig) -> None:
        """Initialize the fusion block."""
        super().__init__()
        self.window = temporal.window
        self.radius = refine.ball_radius
        self.cap = refine.ball_cap
        self.extractor = FeatureExtractor(refine.fe_widths)
        channels = refine.feature_channels
        self.reduce = point_mlp(
            [self.extractor.out_channels * self.window, 2 * channels, channels]
        )
        self.se = SEGate(channels, temporal.se_reduction)

    def _current_features(
        self, points: torch.Tensor, current: torch.Tensor, controlling: torch.Tensor
    ) -> torch.Tensor:
        full_idx, counts = ball_group(points, current, self.radius, self.cap)
        features = self.extractor(points, current, full_idx)
        crowded = counts > self.cap
        if not bool(crowded.any()):
            return features
        # crowded balls are grouped from the controlling points instead
        ctrl_idx, _ = ball_group(points, controlling, self.radius, self.cap)
        ctrl_features = self.extractor(points, controlling, ctrl_idx)
        return torch.where(crowded.unsqueeze(-1), ctrl_features, features)

    def forward(
        self,
        points: torch.Tensor,
        window: Sequence[torch.Tensor],
        controlling: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Fuse window features at the refinement points.

        Parameters
        ----------
        points : torch.Tensor
            Refinement input points (B, M, 3).
        window : sequence of torch.Tensor
            Aligned clouds, oldest first; the last one is the current frame.
        controlling : torch.Tensor
            Controlling points of the current frame (B, K, 3).

        Returns
        -------
        tuple of torch.Tensor
            Gated features ``f_refine`` and the ungated ``f_align``, both (B, M, C_f).

        Raises
        ------
        PreconditionError
            If the window is empty.
        """
        if not window:
            msg = "the sliding window is empty"
            raise PreconditionError(msg)
        current = window[-1]
        past = list(reversed(window[:-1]))[: self.window - 1]
        past += [current] * (self.window - 1 - len(past))
        features = [self._current_features(points, current, controlling)]
        for cloud in past:
            indices, _ = ball_group(points, cloud, self.radius, self.cap)
            features.append(self.extractor(points, cloud, indices))
        f_align = self.reduce(torch.cat(features, dim=-1))
        return self.se(f_align), f_align
