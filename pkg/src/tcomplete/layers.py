"""Shared network building blocks."""

from __future__ import annotations

from collections.abc import Sequence

import torch
from torch import nn


def point_mlp(widths: Sequence[int], *, final_activation: bool = True) -> nn.Sequential:
    """Stack of linear layers applied independently to every point (last dim).

    Parameters
    ----------
    widths : sequence of int
        Input width followed by the output width of every layer.
    final_activation : bool, optional
        Apply ReLU after the last layer too, by default True.
    """
    layers: list[nn.Module] = []
    pairs = list(zip(widths[:-1], widths[1:], strict=True))
    for i, (width_in, width_out) in enumerate(pairs):
        layers.append(nn.Linear(width_in, width_out))
        if final_activation or i < len(pairs) - 1:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def zero_init_(layer: nn.Linear, bias: torch.Tensor | None = None) -> nn.Linear:
    """Zero the weights of a layer and set its bias (zeros by default)."""
    with torch.no_grad():
        layer.weight.zero_()
        if layer.bias is not None:
            if bias is None:
                layer.bias.zero_()
            else:
                layer.bias.copy_(bias)
    return layer


class SEGate(nn.Module):
    """Squeeze-and-excitation gating over the channels of per-point features.

    Squeeze is the channel mean over points, excitation a bottleneck of
    ``channels / reduction`` followed by a sigmoid.
    """

    def __init__(self, channels: int, reduction: int) -> None:
        """Initialize the gate."""
        super().__init__()
        hidden = max(1, channels // reduction)
        self.squeeze = nn.Linear(channels, hidden)
        self.excite = nn.Linear(hidden, channels)
        self.forced_gate: float | None = None

    def gates(self, features: torch.Tensor) -> torch.Tensor:
        """Channel gates (B, 1, C) in (0, 1) for features (B, N, C)."""
        if self.forced_gate is not None:
            return torch.full_like(features[:, :1, :], self.forced_gate)
        pooled = features.mean(dim=1)
        return torch.sigmoid(self.excite(torch.relu(self.squeeze(pooled)))).unsqueeze(1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Scale every channel by its gate."""
        return features * self.gates(features)
