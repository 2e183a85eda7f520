"""Tests for evaluation protocols and reports."""

from pathlib import Path

import numpy as np
import pytest
from syrupy.assertion import SnapshotAssertion

from tcomplete import (
    ConfigError,
    EvalReport,
    OutputExistsError,
    PipelineConfig,
    Split,
    TemporalCompletionNet,
    evaluate,
    load_manifest,
)
from tcomplete.dataset import manifest_path
from tcomplete.evaluate import (
    ACCUMULATED_METHOD,
    ALL_CATEGORIES,
    AVERAGE,
    NO_REFINE_METHOD,
    read_rows,
    write_rows,
)
from tcomplete.types import DatasetManifest, MetricRow

from .conftest import load_fixture

FIXTURE = Path(__file__).parent / "fixtures" / "table_ours.csv"


@pytest.fixture(name="test_manifest")
def split_manifest(dataset_root: Path) -> DatasetManifest:
    """Return the test split of the generated dataset."""
    return load_manifest(manifest_path(dataset_root, Split.TEST))


def test_markdown_table(snapshot: SnapshotAssertion) -> None:
    """Test the per-category table and its half-up rounded average."""
    report = EvalReport(rows=read_rows(FIXTURE))

    assert report.category_table()["tcomplete"][AVERAGE] == pytest.approx(6.635)
    lines = report.to_markdown().splitlines()
    assert lines[0] == "## cd"
    assert lines[2].startswith("| method | box-union | ellipsoid-union |")
    assert lines[2].endswith("| car-body | Average |")
    assert lines[-1] == snapshot


def test_rows_round_trip(tmp_path: Path) -> None:
    """Test CSV rows keep their exact values."""
    rows = read_rows(FIXTURE)
    path = tmp_path / "rows.csv"

    write_rows(path, rows)
    assert [r.to_dict() for r in read_rows(path)] == [r.to_dict() for r in rows]
    assert load_fixture("table_ours.csv").startswith("method,category,frame_index")


def test_series_markdown() -> None:
    """Test metrics over several frames become one column per frame."""
    report = EvalReport(
        rows=[
            MetricRow(method="m", category="all", frame_index=k, metric_name="cd", value=v)
            for k, v in ((1, 1.005), (2, 2.0))
        ]
    )

    assert report.to_markdown().splitlines() == [
        "## cd",
        "",
        "| method | category | 1 | 2 |",
        "|---|---|---|---|",
        "| m | all | 1.01 | 2.00 |",
    ]
    assert report.curve("cd", "m") == [(1, 1.005), (2, 2.0)]


def test_save_and_load(tmp_path: Path) -> None:
    """Test reports are written once unless forced."""
    report = EvalReport(
        rows=read_rows(FIXTURE), samples={"frame_1_input": np.zeros((4, 3))}
    )

    written = report.save(tmp_path)
    assert {p.name for p in written} == {"report.csv", "report.md", "frame_1_input.pcb"}
    loaded = EvalReport.load(tmp_path)
    assert len(loaded.rows) == 8
    assert loaded.samples["frame_1_input"].shape == (4, 3)
    with pytest.raises(OutputExistsError):
        report.save(tmp_path)
    report.save(tmp_path, force=True)


def test_percat(net: TemporalCompletionNet, config: PipelineConfig, test_manifest: DatasetManifest) -> None:
    """Test single-frame Chamfer distance per category."""
    report = evaluate(net, test_manifest, "percat", config.evaluation)

    assert {r.category for r in report.rows} == {"box-union", "chair"}
    assert {(r.method, r.frame_index, r.metric_name) for r in report.rows} == {
        ("tcomplete", 1, "cd")
    }
    assert all(np.isfinite(r.value) and r.value > 0 for r in report.rows)
    assert {"frame_1_input", "frame_1_refined"} <= set(report.samples)


def test_temporal(net: TemporalCompletionNet, config: PipelineConfig, test_manifest: DatasetManifest) -> None:
    """Test per-frame Chamfer distance with pooled standard errors."""
    report = evaluate(net, test_manifest, "temporal", config.evaluation)

    assert sorted(f for f, _ in report.curve("cd", "tcomplete")) == [1, 2]
    assert {r.metric_name for r in report.rows} == {"cd", "cd_stderr"}
    assert all(r.category == ALL_CATEGORIES for r in report.rows if r.metric_name == "cd_stderr")


def test_consistency(net: TemporalCompletionNet, config: PipelineConfig, test_manifest: DatasetManifest) -> None:
    """Test consistency indexes next to the accumulated-input reference."""
    report = evaluate(net, test_manifest, "consistency", config.evaluation)
    rows = [r for r in report.rows if r.metric_name == "consistency"]

    assert {r.method for r in rows} == {"tcomplete", ACCUMULATED_METHOD}
    assert {r.frame_index for r in rows} == {1, 2, 3, 4}
    assert all(r.value >= 0 for r in rows)


def test_ablation(net: TemporalCompletionNet, config: PipelineConfig, test_manifest: DatasetManifest) -> None:
    """Test refinement on and off are both reported."""
    report = evaluate(net, test_manifest, "ablation", config.evaluation)

    assert {r.method for r in report.rows} == {"tcomplete", NO_REFINE_METHOD}


def test_alignment(net: TemporalCompletionNet, config: PipelineConfig, test_manifest: DatasetManifest) -> None:
    """Test alignment quality metrics of the untrained (identity) alignment."""
    report = evaluate(net, test_manifest, "alignment", config.evaluation)
    values = {(r.category, r.frame_index, r.metric_name): r.value for r in report.rows}

    assert set(report.metrics()) == {
        "cd_aligned",
        "cd_input",
        "emd_aligned",
        "emd_input",
        "rot_err_deg",
        "trans_err_m",
    }
    # an identity alignment leaves the input untouched
    for category in ("box-union", "chair"):
        assert values[category, 1, "cd_aligned"] == pytest.approx(
            values[category, 1, "cd_input"], rel=1e-4
        )
        assert 0 <= values[category, 1, "rot_err_deg"] <= 3 * 20.0


def test_input_sweep(net: TemporalCompletionNet, config: PipelineConfig, test_manifest: DatasetManifest) -> None:
    """Test one method per kept input size that fits the network."""
    report = evaluate(
        net, test_manifest, "input-sweep", config.evaluation, sweep_sizes=(64, 32, 16)
    )

    assert {r.method for r in report.rows} == {"tcomplete-32", "tcomplete-16"}


def test_unknown_mode(net: TemporalCompletionNet, test_manifest: DatasetManifest) -> None:
    """Test an unknown protocol is a configuration error."""
    with pytest.raises(ConfigError):
        evaluate(net, test_manifest, "table-9")
