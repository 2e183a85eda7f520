"""Refinement network: residual graph deformation of the merged cloud."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import torch
from torch import nn

from .exceptions import EmptyInputError, PreconditionError, SizeMismatchError
from .geometry import (
    batched_farthest_point_sample,
    canonical_seed_index,
    gather_points,
    knn_edges,
)
from .layers import zero_init_
from .temporal import WindowFusion
from .types import AdjacencyGraph, RefineConfig, TemporalConfig

if TYPE_CHECKING:
    from .align_complete import Stage1Output
    from .temporal import TemporalState

FROM_ALIGNED = 0
FROM_COARSE = 1


@dataclass(kw_only=True, eq=False)
class RefineInput:
    """Merged refinement input of a batch.

    ``points`` (B, N_out, 3) holds N_out / 2 points of the aligned input
    followed by N_out / 2 points of the coarse output. ``provenance`` flags the
    source of every point and ``source_indices`` its index in that source.
    ``edge_index`` addresses the flattened B * N_out points.
    """

    points: torch.Tensor
    provenance: torch.Tensor
    source_indices: torch.Tensor
    edge_index: torch.Tensor
    controlling_points: torch.Tensor
    features: torch.Tensor | None = None

    @property
    def graph(self) -> AdjacencyGraph:
        """Adjacency over the flattened batch."""
        return AdjacencyGraph(
            node_count=self.points.shape[0] * self.points.shape[1],
            edge_index=self.edge_index.cpu().numpy(),
        )


def build_refine_input(
    aligned: torch.Tensor, coarse: torch.Tensor, config: RefineConfig
) -> RefineInput:
    """Merge farthest point samples of the aligned input and the coarse output.

    Each source contributes ``num_out / 2`` points, sampled from its
    centroid-nearest point. The controlling points are the first
    ``controlling_points`` farthest point samples of the aligned input.

    Raises
    ------
    EmptyInputError
        If a source cloud is empty.
    SizeMismatchError
        If a source has fewer points than requested.
    """
    half = config.num_out // 2
    for name, cloud in (("aligned", aligned), ("coarse", coarse)):
        if cloud.shape[1] == 0:
            msg = f"the {name} cloud is empty"
            raise EmptyInputError(msg)
        if cloud.shape[1] < half:
            msg = f"cannot take {half} points from the {name} cloud of {cloud.shape[1]}"
            raise SizeMismatchError(msg)
    sample_size = max(half, min(config.controlling_points, aligned.shape[1]))
    idx_aligned = batched_farthest_point_sample(
        aligned, sample_size, canonical_seed_index(aligned)
    )
    idx_coarse = batched_farthest_point_sample(
        coarse, half, canonical_seed_index(coarse)
    )
    points = torch.cat(
        [
            gather_points(aligned, idx_aligned[:, :half]),
            gather_points(coarse, idx_coarse),
        ],
        dim=1,
    )
    batch = aligned.shape[0]
    provenance = torch.cat(
        [
            torch.full((batch, half), FROM_ALIGNED, dtype=torch.long),
            torch.full((batch, half), FROM_COARSE, dtype=torch.long),
        ],
        dim=1,
    ).to(aligned.device)
    controlling = gather_points(aligned, idx_aligned[:, : config.controlling_points])
    return RefineInput(
        points=points,
        provenance=provenance,
        source_indices=torch.cat([idx_aligned[:, :half], idx_coarse], dim=1),
        edge_index=knn_edges(points, config.knn),
        controlling_points=controlling,
    )


class GraphConv(nn.Module):
    """Graph convolution with mean aggregation over neighbors."""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        """Initialize the layer."""
        super().__init__()
        self.self_linear = nn.Linear(in_channels, out_channels)
        self.neighbor_linear = nn.Linear(in_channels, out_channels, bias=False)

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        """Features (V, out) for node features (V, in) and edges (2, E)."""
        source, target = edge_index
        summed = torch.zeros_like(x).index_add(0, source, x[target])
        degree = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device).index_add(
            0, source, torch.ones_like(source, dtype=x.dtype)
        )
        neighbors = summed / degree.clamp_min(1.0).unsqueeze(-1)
        return self.self_linear(x) + self.neighbor_linear(neighbors)


class GraphDeformer(nn.Module):
    """Stacked graph convolutions regressing a per-point offset.

    Hidden layers of equal width get a residual skip. The output layer starts
    at zero, so the deformation is the identity at initialization.
    """

    def __init__(self, config: RefineConfig) -> None:
        """Initialize the deformer."""
        super().__init__()
        self.centered = config.centered_coordinates
        widths = [3 + config.feature_channels, *config.gcn_hidden, 3]
        self.layers = nn.ModuleList(
            GraphConv(w_in, w_out) for w_in, w_out in zip(widths[:-1], widths[1:], strict=True)
        )
        last: GraphConv = self.layers[-1]  # type: ignore[assignment]
        zero_init_(last.self_linear)
        zero_init_(last.neighbor_linear)

    def forward(
        self, points: torch.Tensor, features: torch.Tensor, edge_index: torch.Tensor
    ) -> torch.Tensor:
        """Offsets (B, N, 3) for points (B, N, 3) with features (B, N, C_f)."""
        batch, n, _ = points.shape
        coords = points - points.mean(dim=1, keepdim=True) if self.centered else points
        x = torch.cat([coords, features], dim=-1).reshape(batch * n, -1)
        for i, layer in enumerate(self.layers):
            y = layer(x, edge_index)
            if i < len(self.layers) - 1:
                y = torch.relu(y)
                if y.shape == x.shape:
                    y = y + x
            x = y
        return x.view(batch, n, 3)


class RefineNet(nn.Module):
    """Second stage: window feature fusion and graph deformation."""

    def __init__(self, config: RefineConfig, temporal: TemporalConfig) -> None:
        """Initialize the network."""
        super().__init__()
        self.config = config
        self.fusion = WindowFusion(temporal, config)
        self.deformer = GraphDeformer(config)

    def build_refine_input(
        self, aligned: torch.Tensor, coarse: torch.Tensor
    ) -> RefineInput:
        """Merged input for this network's configuration."""
        return build_refine_input(aligned, coarse, self.config)

    def gcn_deform(self, refine_input: RefineInput) -> torch.Tensor:
        """Refined cloud ``P_in + offset``.

        Raises
        ------
        PreconditionError
            If the input carries no features.
        """
        if refine_input.features is None:
            msg = "refinement input has no features"
            raise PreconditionError(msg)
        offsets = self.deformer(
            refine_input.points, refine_input.features, refine_input.edge_index
        )
        return refine_input.points + offsets

    def stage2_forward(
        self, stage1: Stage1Output, state: TemporalState
    ) -> tuple[torch.Tensor, RefineInput]:
        """Refine a first-stage result using the window of `state`.

        The window must already contain the current aligned cloud.

        Raises
        ------
        PreconditionError
            If the first stage has not decoded a coarse cloud or the window is
            empty.
        """
        if stage1.coarse is None:
            msg = "the first stage result has no coarse cloud"
            raise PreconditionError(msg)
        refine_input = self.build_refine_input(stage1.aligned[0], stage1.coarse)
        f_refine, _ = self.fusion(
            refine_input.points, state.window, refine_input.controlling_points
        )
        refine_input = replace(refine_input, features=f_refine)
        return self.gcn_deform(refine_input), refine_input
