"""Full completion network, the online per-frame step and the checkpoint container."""

from __future__ import annotations

from dataclasses import dataclass
import logging
from pathlib import Path
import pickle
from typing import TYPE_CHECKING, Any, Self

from mashumaro.exceptions import InvalidFieldValue, MissingField
import orjson
import torch
from torch import nn

from .align_complete import AlignCompleteNet, Stage1Output
from .const import CHECKPOINT_VERSION
from .exceptions import CheckpointError, ConfigError
from .refine import RefineInput, RefineNet
from .temporal import ShapeMemory, TemporalState, window_push
from .types import (
    CheckpointHeader,
    EncoderConfig,
    PipelineConfig,
    RefineConfig,
    Stage,
    TemporalConfig,
    TrainProgress,
)

if TYPE_CHECKING:
    from collections.abc import Iterator

_LOGGER = logging.getLogger(__package__)


@dataclass(kw_only=True, eq=False)
class StepOutput:
    """Result of processing one frame."""

    stage1: Stage1Output
    state: TemporalState
    refined: torch.Tensor | None = None
    refine_input: RefineInput | None = None

    @property
    def aligned(self) -> torch.Tensor:
        """Aligned input at full resolution."""
        return self.stage1.aligned[0]

    @property
    def coarse(self) -> torch.Tensor:
        """Coarse completion."""
        assert self.stage1.coarse is not None  # noqa: S101
        return self.stage1.coarse

    @property
    def final(self) -> torch.Tensor:
        """Refined cloud, or the coarse one when refinement was skipped."""
        return self.refined if self.refined is not None else self.coarse


class TemporalCompletionNet(nn.Module):
    """Alignment, coarse completion, recurrent memory and refinement."""

    def __init__(
        self,
        encoder: EncoderConfig,
        temporal: TemporalConfig,
        refine: RefineConfig,
    ) -> None:
        """Initialize the network.

        Raises
        ------
        ConfigError
            If the sections do not fit together.
        """
        super().__init__()
        if temporal.hidden_dim != encoder.code_dim:
            msg = "temporal.hidden_dim must equal encoder.code_dim"
            raise ConfigError(msg)
        if refine.num_out // 2 > min(encoder.num_points, encoder.num_coarse):
            msg = "refine.num_out / 2 exceeds the aligned or coarse cloud size"
            raise ConfigError(msg)
        self.encoder_config = encoder
        self.temporal_config = temporal
        self.refine_config = refine
        self.stage1 = AlignCompleteNet(encoder)
        self.memory = ShapeMemory(temporal)
        self.stage2 = RefineNet(refine, temporal)

    @classmethod
    def from_config(cls, config: PipelineConfig) -> Self:
        """Build the network described by a pipeline configuration."""
        return cls(config.encoder, config.temporal, config.refine)

    def initial_state(
        self, batch_size: int = 1, *, device: torch.device | None = None
    ) -> TemporalState:
        """Empty per-stream state matching the parameters' dtype."""
        param = next(self.parameters())
        return TemporalState.initial(
            self.temporal_config,
            batch_size,
            dtype=param.dtype,
            device=device or param.device,
        )

    def step(
        self,
        points: torch.Tensor,
        state: TemporalState,
        frame: int,
        *,
        use_memory: bool = True,
        refine: bool = True,
    ) -> StepOutput:
        """Process one frame of a batch of streams.

        Parameters
        ----------
        points : torch.Tensor
            Disturbed partial clouds (B, N, 3).
        state : TemporalState
            State after the previous frame.
        frame : int
            Frame index, strictly larger than the last one in `state`.
        use_memory : bool, optional
            Fuse the shape code with the recurrent memory, by default True.
        refine : bool, optional
            Run the refinement stage, by default True.

        Returns
        -------
        StepOutput
            Per-stage results and the new state.
        """
        stage1, fused_state = self.stage1.stage1_forward(
            points, self.memory if use_memory else None, state
        )
        assert fused_state is not None  # noqa: S101
        new_state = window_push(fused_state, stage1.aligned[0], frame)
        output = StepOutput(stage1=stage1, state=new_state)
        if refine:
            output.refined, output.refine_input = self.stage2.stage2_forward(
                stage1, new_state
            )
        return output

    def temporal_parameters(self) -> Iterator[nn.Parameter]:
        """Parameters of the temporal units: memory and channel gate."""
        yield from self.memory.parameters()
        yield from self.stage2.fusion.se.parameters()

    def stage_modules(self, stage: Stage) -> list[nn.Module]:
        """Modules optimized in a training stage."""
        match stage:
            case Stage.ALIGN:
                return [self.stage1]
            case Stage.REFINE:
                return [self.stage2]
            case Stage.TEMPORAL:
                return [self]
        msg = f"Unknown stage {stage!r}"
        raise ConfigError(msg)

    def freeze_for(self, stage: Stage) -> None:
        """Enable gradients only for the parameters a stage optimizes."""
        self.requires_grad_(False)
        for module in self.stage_modules(stage):
            module.requires_grad_(True)

    def parameter_groups(
        self, stage: Stage, learning_rate: float, non_temporal_scale: float = 0.1
    ) -> list[dict[str, Any]]:
        """Optimizer parameter groups of a stage.

        In the temporal stage every parameter trains; those outside the
        temporal units use ``learning_rate * non_temporal_scale``.
        """
        if stage is not Stage.TEMPORAL:
            params = [p for m in self.stage_modules(stage) for p in m.parameters()]
            return [{"params": params, "lr": learning_rate}]
        temporal_ids = {id(p) for p in self.temporal_parameters()}
        return [
            {
                "params": [p for p in self.parameters() if id(p) in temporal_ids],
                "lr": learning_rate,
            },
            {
                "params": [p for p in self.parameters() if id(p) not in temporal_ids],
                "lr": learning_rate * non_temporal_scale,
            },
        ]


@dataclass(kw_only=True, eq=False)
class Checkpoint:
    """Network parameters with their configuration and training position."""

    header: CheckpointHeader
    state_dict: dict[str, torch.Tensor]
    optimizer: dict[str, Any] | None = None
    scheduler: dict[str, Any] | None = None

    @classmethod
    def from_network(
        cls,
        net: TemporalCompletionNet,
        *,
        completed_stages: list[Stage] | None = None,
        progress: TrainProgress | None = None,
        optimizer: dict[str, Any] | None = None,
        scheduler: dict[str, Any] | None = None,
    ) -> Self:
        """Capture the current parameters of a network."""
        return cls(
            header=CheckpointHeader(
                encoder=net.encoder_config,
                temporal=net.temporal_config,
                refine=net.refine_config,
                completed_stages=list(completed_stages or []),
                progress=progress,
            ),
            state_dict={k: v.detach().cpu().clone() for k, v in net.state_dict().items()},
            optimizer=optimizer,
            scheduler=scheduler,
        )

    def build_network(self, device: torch.device | None = None) -> TemporalCompletionNet:
        """Instantiate the network and load the stored parameters.

        Raises
        ------
        CheckpointError
            If the parameters do not match the stored configuration.
        """
        net = TemporalCompletionNet(
            self.header.encoder, self.header.temporal, self.header.refine
        )
        try:
            net.load_state_dict(self.state_dict)
        except RuntimeError as e:
            msg = f"parameters do not match the stored configuration: {e}"
            raise CheckpointError(msg) from e
        return net.to(device) if device is not None else net

    def save(self, path: Path | str) -> None:
        """Write the checkpoint atomically.

        Raises
        ------
        CheckpointError
            If the file cannot be written.
        """
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        payload = {
            "version": CHECKPOINT_VERSION,
            "header": self.header.to_json(),
            "state_dict": self.state_dict,
            "optimizer": self.optimizer,
            "scheduler": self.scheduler,
        }
        try:
            torch.save(payload, tmp)
            tmp.replace(path)
        except OSError as e:
            raise CheckpointError(e.strerror or "cannot write checkpoint", path) from e
        _LOGGER.info("Saved checkpoint %s", path)

    @classmethod
    def load(cls, path: Path | str) -> Self:
        """Read a checkpoint written by :meth:`save`.

        Raises
        ------
        CheckpointError
            If the file is missing, corrupt or of another version.
        """
        path = Path(path)
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except FileNotFoundError as e:
            msg = "checkpoint not found"
            raise CheckpointError(msg, path) from e
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
            msg = f"cannot read checkpoint: {e}"
            raise CheckpointError(msg, path) from e
        if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
            msg = "not a checkpoint of a supported version"
            raise CheckpointError(msg, path)
        try:
            header = CheckpointHeader.from_json(payload["header"])
        except (
            InvalidFieldValue,
            KeyError,
            MissingField,
            TypeError,
            ValueError,
            orjson.JSONDecodeError,
        ) as e:
            msg = f"invalid checkpoint header: {e}"
            raise CheckpointError(msg, path) from e
        except ConfigError as e:
            raise CheckpointError(str(e), path) from e
        return cls(
            header=header,
            state_dict=payload["state_dict"],
            optimizer=payload.get("optimizer"),
            scheduler=payload.get("scheduler"),
        )
