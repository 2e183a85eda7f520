"""Tests for Tcomplete."""

import asyncio
from functools import lru_cache
import pathlib

import pytest
import torch

from tcomplete import (
    DatasetConfig,
    EncoderConfig,
    PipelineConfig,
    RefineConfig,
    ShapeFamily,
    TemporalCompletionNet,
    TemporalConfig,
    TrainConfig,
    generate_dataset,
)
from tcomplete.types import EvalConfig


@lru_cache
def load_fixture(filename: str) -> str:
    """Load a fixture."""

    return (
        pathlib.Path(__file__)
        .parent.joinpath("fixtures", filename)
        .read_text(encoding="utf-8")
    )


@lru_cache
def load_bytes_fixture(filename: str) -> bytes:
    """Load a fixture."""

    return pathlib.Path(__file__).parent.joinpath("fixtures", filename).read_bytes()


def tiny_config(**train: int | str) -> PipelineConfig:
    """Return a pipeline small enough to run on CPU in a test."""

    return PipelineConfig(
        dataset=DatasetConfig(
            families=[ShapeFamily.BOX_UNION, ShapeFamily.CHAIR],
            train_shapes=2,
            val_shapes=1,
            test_shapes=1,
            frames=5,
            points_per_frame=32,
            complete_points=32,
            surface_points=600,
        ),
        encoder=EncoderConfig(
            num_points=32,
            code_dim=16,
            feature_channels=8,
            point_widths=[8, 8, 16],
            num_coarse=32,
            decoder_widths=[32],
            folding_grid=2,
            folding_widths=[16],
            tnet_widths=[8, 16],
            tnet_fc_widths=[16],
        ),
        temporal=TemporalConfig(hidden_dim=16),
        refine=RefineConfig(
            num_out=32,
            controlling_points=8,
            knn=4,
            feature_channels=16,
            ball_radius=0.3,
            ball_cap=4,
            fe_widths=[8, 8, 8],
            gcn_hidden=[8, 8, 8],
        ),
        train=TrainConfig(
            batch_size=2, align_epochs=1, refine_epochs=1, temporal_epochs=1, **train
        ),
        evaluation=EvalConfig(repeats=2, frames=2, consistency_frames=5, batch_size=2),
    )


@pytest.fixture(name="config")
def pipeline_config() -> PipelineConfig:
    """Return a tiny pipeline configuration."""

    return tiny_config()


@pytest.fixture(name="net")
def completion_net(config: PipelineConfig) -> TemporalCompletionNet:
    """Return a freshly initialized tiny network."""

    torch.manual_seed(0)
    return TemporalCompletionNet.from_config(config)


@pytest.fixture(name="dataset_root", scope="session")
def generated_dataset(tmp_path_factory: pytest.TempPathFactory) -> pathlib.Path:
    """Generate a tiny dataset once per session."""

    root = tmp_path_factory.mktemp("data")
    loop = asyncio.new_event_loop()
    try:
        loop.run_until_complete(generate_dataset(tiny_config().dataset, root=root))
    finally:
        loop.close()
    return root
