"""Alignment and coarse completion network.

Three resolutions of the input (N, N/2, N/4 points) are each aligned by their
own input T-Net, encoded by a shared point trunk with a feature T-Net, and
max-pooled to shape codes. The concatenated codes are reduced to one code,
optionally fused with the recurrent memory, and decoded to a coarse cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging

import torch
from torch import nn

from .exceptions import PreconditionError, SizeMismatchError
from .geometry import (
    batched_farthest_point_sample,
    canonical_seed_index,
    gather_points,
    rotation_6d_to_matrix_batch,
    sanitize_rotation_6d,
)
from .layers import point_mlp, zero_init_
from .temporal import ShapeMemory, TemporalState
from .types import EncoderConfig

_LOGGER = logging.getLogger(__package__)

IDENTITY_POSE = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(kw_only=True, eq=False)
class Stage1Output:
    """Per-frame result of alignment and coarse completion.

    Lists hold one entry per resolution (N, N/2, N/4).
    """

    aligned: list[torch.Tensor]
    translations: list[torch.Tensor]
    rotations: list[torch.Tensor]
    rotations_6d: list[torch.Tensor]
    codes: list[torch.Tensor]
    shape_code: torch.Tensor
    feature_transforms: list[torch.Tensor]
    sample_indices: list[torch.Tensor]
    fused_code: torch.Tensor | None = None
    coarse: torch.Tensor | None = None
    extras: dict[str, torch.Tensor] = field(default_factory=dict)


class InputTNet(nn.Module):
    """Predicts a 6D rotation and a translation for a whole cloud."""

    def __init__(self, widths: list[int], fc_widths: list[int]) -> None:
        """Initialize the T-Net with an identity prediction."""
        super().__init__()
        self.features = point_mlp([3, *widths])
        self.head = point_mlp([widths[-1], *fc_widths]) if fc_widths else nn.Identity()
        self.output = zero_init_(
            nn.Linear(fc_widths[-1] if fc_widths else widths[-1], 9),
            torch.tensor(IDENTITY_POSE),
        )
        self.degenerate_predictions = 0

    def forward(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw 6D rotation (B, 6) and translation (B, 3) for clouds (B, n, 3)."""
        pooled = self.features(points).max(dim=1).values
        out = self.output(self.head(pooled))
        return out[:, :6], out[:, 6:]

    def pose(
        self, points: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Rotation matrices, translations and the sanitized 6D predictions."""
        r6, translation = self(points)
        r6, fixed = sanitize_rotation_6d(r6)
        if fixed:
            self.degenerate_predictions += fixed
            _LOGGER.warning(
                "Input T-Net produced %s degenerate rotations so far",
                self.degenerate_predictions,
            )
        return rotation_6d_to_matrix_batch(r6), translation, r6


class FeatureTNet(nn.Module):
    """Predicts a C x C transform applied to per-point features."""

    def __init__(self, channels: int, widths: list[int], fc_widths: list[int]) -> None:
        """Initialize the T-Net with an identity prediction."""
        super().__init__()
        self.channels = channels
        self.features = point_mlp([channels, *widths])
        self.head = point_mlp([widths[-1], *fc_widths]) if fc_widths else nn.Identity()
        self.output = zero_init_(
            nn.Linear(fc_widths[-1] if fc_widths else widths[-1], channels * channels),
            torch.eye(channels).flatten(),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Transform (B, C, C) for features (B, n, C)."""
        pooled = self.features(features).max(dim=1).values
        return self.output(self.head(pooled)).view(-1, self.channels, self.channels)


class ShapeEncoder(nn.Module):
    """Point trunk shared by all resolutions, with a feature T-Net inside."""

    def __init__(self, config: EncoderConfig) -> None:
        """Initialize the encoder."""
        super().__init__()
        split = config.point_widths.index(config.feature_channels)
        self.front = point_mlp([3, *config.point_widths[: split + 1]])
        self.feature_tnet = FeatureTNet(
            config.feature_channels, config.tnet_widths, config.tnet_fc_widths
        )
        back = [config.feature_channels, *config.point_widths[split + 1 :]]
        self.back = (
            point_mlp(back, final_activation=False) if len(back) > 1 else nn.Identity()
        )

    def forward(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Shape code (B, D) and feature transform (B, C, C) of clouds (B, n, 3)."""
        features = self.front(points)
        transform = self.feature_tnet(features)
        features = self.back(features @ transform)
        return features.max(dim=1).values, transform


class FoldingDecoder(nn.Module):
    """Fully connected seeds, each folded with a small 2D grid."""

    def __init__(self, config: EncoderConfig) -> None:
        """Initialize the decoder."""
        super().__init__()
        grid_size = config.folding_grid
        self.num_seeds = config.num_coarse // grid_size**2
        self.seeds = point_mlp(
            [config.code_dim, *config.decoder_widths, self.num_seeds * 3],
            final_activation=False,
        )
        axis = torch.linspace(-0.05, 0.05, grid_size)
        grid = torch.stack(torch.meshgrid(axis, axis, indexing="ij"), dim=-1)
        self.register_buffer("grid", grid.reshape(-1, 2))
        self.fold = point_mlp(
            [config.code_dim + 2 + 3, *config.folding_widths, 3],
            final_activation=False,
        )

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        """Coarse cloud (B, num_coarse, 3) for codes (B, D)."""
        batch = code.shape[0]
        grid: torch.Tensor = self.grid  # type: ignore[assignment]
        cells = grid.shape[0]
        seeds = self.seeds(code).view(batch, self.num_seeds, 1, 3)
        centers = seeds.expand(-1, -1, cells, -1).reshape(batch, -1, 3)
        offsets = grid.to(code.dtype).expand(batch, self.num_seeds, -1, -1)
        offsets = offsets.reshape(batch, -1, 2)
        codes = code.unsqueeze(1).expand(-1, centers.shape[1], -1)
        return self.fold(torch.cat([codes, offsets, centers], dim=-1)) + centers


class AlignCompleteNet(nn.Module):
    """First stage: alignment and coarse completion."""

    def __init__(self, config: EncoderConfig) -> None:
        """Initialize the network."""
        super().__init__()
        self.config = config
        self.input_tnets = nn.ModuleList(
            InputTNet(config.tnet_widths, config.tnet_fc_widths) for _ in range(3)
        )
        self.encoder = ShapeEncoder(config)
        self.reduce = nn.Linear(3 * config.code_dim, config.code_dim)
        self.decoder = FoldingDecoder(config)

    @property
    def degenerate_predictions(self) -> int:
        """Degenerate 6D predictions sanitized so far, over all input T-Nets."""
        return sum(tnet.degenerate_predictions for tnet in self.input_tnets)  # type: ignore[misc]

    def sample_indices(self, points: torch.Tensor) -> list[torch.Tensor]:
        """Indices of the three resolutions, seeded at the centroid-nearest point.

        Resolution 0 keeps every point in input order; resolution 2 is the
        prefix of resolution 1, so the resolutions are nested.
        """
        batch, n, _ = points.shape
        full = torch.arange(n, device=points.device).expand(batch, n)
        half = batched_farthest_point_sample(
            points.detach(), n // 2, canonical_seed_index(points.detach())
        )
        return [full, half, half[:, : n // 4]]

    def input_tnet(
        self, points: torch.Tensor, level: int = 0
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw 6D rotation and translation predicted at one resolution."""
        return self.input_tnets[level](points)

    def feature_tnet(self, features: torch.Tensor) -> torch.Tensor:
        """Feature transform of the shared trunk for features (B, n, C)."""
        return self.encoder.feature_tnet(features)

    def encode(self, points: torch.Tensor) -> Stage1Output:
        """Align and encode a batch of clouds (B, N, 3); ``coarse`` stays empty.

        Raises
        ------
        SizeMismatchError
            If the clouds do not have the configured point count.
        """
        if points.dim() != 3 or points.shape[1:] != (self.config.num_points, 3):  # noqa: PLR2004
            msg = f"expected clouds of shape (B, {self.config.num_points}, 3), got {tuple(points.shape)}"
            raise SizeMismatchError(msg)
        indices = self.sample_indices(points)
        out = Stage1Output(
            aligned=[],
            translations=[],
            rotations=[],
            rotations_6d=[],
            codes=[],
            shape_code=points.new_zeros(()),
            feature_transforms=[],
            sample_indices=indices,
        )
        for level, index in enumerate(indices):
            sample = gather_points(points, index)
            rotation, translation, r6 = self.input_tnets[level].pose(sample)
            aligned = sample @ rotation.transpose(1, 2) + translation.unsqueeze(1)
            code, transform = self.encoder(aligned)
            out.aligned.append(aligned)
            out.translations.append(translation)
            out.rotations.append(rotation)
            out.rotations_6d.append(r6)
            out.codes.append(code)
            out.feature_transforms.append(transform)
        out.shape_code = self.reduce(torch.cat(out.codes, dim=-1))
        return out

    def decode(self, code: torch.Tensor) -> torch.Tensor:
        """Coarse complete cloud in the canonical frame for codes (B, D)."""
        return self.decoder(code)

    def stage1_forward(
        self,
        points: torch.Tensor,
        memory: ShapeMemory | None = None,
        state: TemporalState | None = None,
    ) -> tuple[Stage1Output, TemporalState | None]:
        """Encode, optionally fuse the code with the memory, and decode.

        Without `memory` the result equals ``encode`` followed by ``decode``
        and the state is returned unchanged.

        Raises
        ------
        PreconditionError
            If a memory is given without a state.
        """
        out = self.encode(points)
        code = out.shape_code
        if memory is not None:
            if state is None:
                msg = "a temporal state is required when fusing with the memory"
                raise PreconditionError(msg)
            code, state = memory.gru_update(code, state)
        out.fused_code = code
        out.coarse = self.decode(code)
        return out, state
