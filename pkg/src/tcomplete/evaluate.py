"""Evaluation protocols and their CSV / markdown reports.

Reports are lists of :class:`MetricRow`. Chamfer distances are per-point
squared distances scaled by 10^4. Every protocol averages over
``EvalConfig.repeats`` independently disturbed copies of each test sequence.
"""

from __future__ import annotations

from collections import defaultdict
import csv
from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch

from .const import CONSISTENCY_GROUP, INPUT_SWEEP_SIZES, METHOD_NAME
from .dataset import accumulate_frames, lift_input, read_sequence
from .exceptions import ConfigError, OutputExistsError, StorageError
from .geometry import apply_pose, rotation_angle_deg, sample_disturbance
from .helpers import derived_rng, mean, round_half_up, standard_error
from .losses import emd, per_point_cd, sequence_consistency
from .pointfile import read_pcb, write_pcb
from .types import (
    DatasetManifest,
    DisturbanceLimits,
    EvalConfig,
    EvalMode,
    MetricRow,
    RigidPose,
)

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from .pipeline import TemporalCompletionNet

_LOGGER = logging.getLogger(__package__)

REPORT_CSV = "report.csv"
REPORT_MD = "report.md"
CLOUD_DIR = "clouds"
AVERAGE = "Average"
ALL_CATEGORIES = "all"
ACCUMULATED_METHOD = "accumulated-input"
NO_REFINE_METHOD = f"{METHOD_NAME}-no-refine"
SAMPLE_KINDS = ("input", "aligned", "coarse", "refined")
_CSV_FIELDS = ("method", "category", "frame_index", "metric_name", "value")


@dataclass(kw_only=True, eq=False)
class EvalReport:
    """Metric rows plus the clouds of one example stream for plotting."""

    rows: list[MetricRow] = field(default_factory=list)
    samples: dict[str, np.ndarray] = field(default_factory=dict)

    def __bool__(self) -> bool:
        """Whether the report holds anything."""
        return bool(self.rows or self.samples)

    def merge(self, rows: Iterable[MetricRow]) -> None:
        """Add externally computed rows, e.g. baseline results."""
        self.rows.extend(rows)

    def metrics(self) -> list[str]:
        """Metric names in order of first appearance."""
        return list(dict.fromkeys(r.metric_name for r in self.rows))

    def category_table(
        self, metric: str = "cd", frame_index: int = 1
    ) -> dict[str, dict[str, float]]:
        """Per method, the value of every category plus their average.

        Examples
        --------
        >>> report = EvalReport(rows=[
        ...     MetricRow(method="m", category=c, frame_index=1, metric_name="cd", value=v)
        ...     for c, v in (("a", 1.0), ("b", 2.0))])
        >>> report.category_table()["m"][AVERAGE]
        1.5
        """
        table: dict[str, dict[str, float]] = defaultdict(dict)
        for row in self.rows:
            if row.metric_name == metric and row.frame_index == frame_index:
                table[row.method][row.category] = row.value
        for values in table.values():
            values[AVERAGE] = mean(values.values())
        return dict(table)

    def curve(self, metric: str, method: str, category: str = ALL_CATEGORIES) -> list[tuple[int, float]]:
        """(frame, value) pairs of a per-frame metric, sorted by frame."""
        return sorted(
            (r.frame_index, r.value)
            for r in self.rows
            if r.metric_name == metric and r.method == method and r.category == category
        )

    def to_markdown(self) -> str:
        """Markdown tables, one per metric, with values rounded half-up to 2 places."""
        lines: list[str] = []
        for metric in self.metrics():
            rows = [r for r in self.rows if r.metric_name == metric]
            frames = sorted({r.frame_index for r in rows})
            lines.append(f"## {metric}")
            lines.append("")
            if len(frames) == 1:
                table = self.category_table(metric, frames[0])
                categories = list(
                    dict.fromkeys(r.category for r in rows)
                ) + [AVERAGE]
                lines.append("| method | " + " | ".join(categories) + " |")
                lines.append("|---" * (len(categories) + 1) + "|")
                for method, values in table.items():
                    cells = [
                        round_half_up(values[c]) if c in values else "-" for c in categories
                    ]
                    lines.append(f"| {method} | " + " | ".join(cells) + " |")
            else:
                series: dict[tuple[str, str], dict[int, float]] = defaultdict(dict)
                for r in rows:
                    series[r.method, r.category][r.frame_index] = r.value
                lines.append(
                    "| method | category | " + " | ".join(str(f) for f in frames) + " |"
                )
                lines.append("|---" * (len(frames) + 2) + "|")
                for (method, category), values in series.items():
                    cells = [
                        round_half_up(values[f]) if f in values else "-" for f in frames
                    ]
                    lines.append(f"| {method} | {category} | " + " | ".join(cells) + " |")
            lines.append("")
        return "\n".join(lines)

    def save(self, directory: Path | str, *, force: bool = False) -> list[Path]:
        """Write ``report.csv``, ``report.md`` and the example clouds.

        Raises
        ------
        OutputExistsError
            If a report exists in `directory` and `force` is not set.
        """
        directory = Path(directory)
        csv_path = directory / REPORT_CSV
        if csv_path.exists() and not force:
            msg = f"{csv_path} exists, use --force to overwrite"
            raise OutputExistsError(msg)
        try:
            (directory / CLOUD_DIR).mkdir(parents=True, exist_ok=True)
            write_rows(csv_path, self.rows)
            md_path = directory / REPORT_MD
            md_path.write_text(self.to_markdown(), encoding="utf-8")
        except OSError as e:
            raise StorageError(e.strerror or "cannot write report", directory) from e
        written = [csv_path, md_path]
        for name, cloud in self.samples.items():
            path = directory / CLOUD_DIR / f"{name}.pcb"
            write_pcb(path, cloud)
            written.append(path)
        return written

    @classmethod
    def load(cls, directory: Path | str) -> EvalReport:
        """Read a report directory written by :meth:`save`."""
        directory = Path(directory)
        clouds = directory / CLOUD_DIR
        samples = (
            {p.stem: read_pcb(p) for p in sorted(clouds.glob("*.pcb"))}
            if clouds.is_dir()
            else {}
        )
        return cls(rows=read_rows(directory / REPORT_CSV), samples=samples)


def write_rows(path: Path | str, rows: Iterable[MetricRow]) -> None:
    """Write metric rows as CSV."""
    with Path(path).open("w", newline="", encoding="utf-8") as fp:
        writer = csv.DictWriter(fp, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({**row.to_dict(), "value": repr(row.value)})


def read_rows(path: Path | str) -> list[MetricRow]:
    """Read metric rows from CSV.

    Raises
    ------
    StorageError
        If the file cannot be read or a row is malformed.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fp:
            records = list(csv.DictReader(fp))
    except OSError as e:
        raise StorageError(e.strerror or "cannot read report", path) from e
    try:
        return [
            MetricRow(
                method=r["method"],
                category=r["category"],
                frame_index=int(r["frame_index"]),
                metric_name=r["metric_name"],
                value=float(r["value"]),
            )
            for r in records
        ]
    except (KeyError, TypeError, ValueError) as e:
        msg = f"malformed report row: {e}"
        raise StorageError(msg, path) from e


@dataclass(kw_only=True, eq=False)
class EvalStream:
    """Disturbed frames of one test sequence."""

    category: str
    inputs: np.ndarray
    aligned_gt: np.ndarray
    poses: list[RigidPose]
    complete: np.ndarray


@dataclass(kw_only=True, eq=False)
class FrameResult:
    """Network outputs of one frame of one stream."""

    aligned: np.ndarray
    coarse: np.ndarray
    final: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray


def build_streams(
    manifest: DatasetManifest,
    *,
    frames: int,
    repeat: int,
    seed: int,
    limits: DisturbanceLimits,
    keep_points: int | None = None,
) -> list[EvalStream]:
    """Re-disturb the first `frames` frames of every sequence.

    With `keep_points`, every frame is reduced to that many points and lifted
    back to its size by re-selection.
    """
    streams = []
    for index, entry in enumerate(manifest.entries):
        sequence = read_sequence(Path(manifest.root) / entry.directory)
        rng = derived_rng(seed, repeat, index)
        count = min(frames, len(sequence))
        inputs, aligned, poses = [], [], []
        for k in range(count):
            gt = sequence.aligned(k)
            pose = sample_disturbance(rng, limits)
            cloud = apply_pose(gt, pose)
            if keep_points is not None:
                cloud = lift_input(cloud, keep_points, rng)
            inputs.append(cloud.astype(np.float32))
            aligned.append(gt)
            poses.append(pose)
        streams.append(
            EvalStream(
                category=str(entry.category),
                inputs=np.stack(inputs),
                aligned_gt=np.stack(aligned),
                poses=poses,
                complete=np.asarray(sequence.gt_complete, dtype=np.float64),
            )
        )
    return streams


def run_streams(
    net: TemporalCompletionNet,
    streams: Sequence[EvalStream],
    *,
    batch_size: int = 8,
    use_memory: bool = True,
    refine: bool = True,
) -> list[list[FrameResult]]:
    """Run streams of equal length through the network, `batch_size` at a time."""
    net.eval()
    dtype = next(net.parameters()).dtype
    results: list[list[FrameResult]] = []
    for start in range(0, len(streams), batch_size):
        chunk = streams[start : start + batch_size]
        frames = min(s.inputs.shape[0] for s in chunk)
        inputs = torch.from_numpy(np.stack([s.inputs[:frames] for s in chunk])).to(dtype)
        per_stream: list[list[FrameResult]] = [[] for _ in chunk]
        with torch.no_grad():
            state = net.initial_state(len(chunk))
            for frame in range(frames):
                step = net.step(
                    inputs[:, frame], state, frame, use_memory=use_memory, refine=refine
                )
                state = step.state
                for b, out in enumerate(per_stream):
                    out.append(
                        FrameResult(
                            aligned=step.aligned[b].double().numpy(),
                            coarse=step.coarse[b].double().numpy(),
                            final=step.final[b].double().numpy(),
                            rotation=step.stage1.rotations[0][b].double().numpy(),
                            translation=step.stage1.translations[0][b].double().numpy(),
                        )
                    )
        results.extend(per_stream)
    return results


class _Collector:
    """Groups raw values by (method, category, frame, metric) and averages them."""

    def __init__(self) -> None:
        self.values: dict[tuple[str, str, int, str], list[float]] = defaultdict(list)

    def add(self, method: str, category: str, frame: int, metric: str, value: float) -> None:
        """Record a value for its category and for the pooled category."""
        self.values[method, category, frame, metric].append(value)
        self.values[method, ALL_CATEGORIES, frame, metric].append(value)

    def rows(self, *, with_stderr: bool = False) -> list[MetricRow]:
        """Averaged rows; pooled rows and standard errors only with `with_stderr`."""
        rows = []
        for (method, category, frame, metric), values in self.values.items():
            if category == ALL_CATEGORIES and not with_stderr:
                continue
            rows.append(
                MetricRow(
                    method=method,
                    category=category,
                    frame_index=frame,
                    metric_name=metric,
                    value=mean(values),
                )
            )
            if with_stderr and category == ALL_CATEGORIES:
                rows.append(
                    MetricRow(
                        method=method,
                        category=category,
                        frame_index=frame,
                        metric_name=f"{metric}_stderr",
                        value=standard_error(values),
                    )
                )
        return rows


def _sample_clouds(stream: EvalStream, results: list[FrameResult]) -> dict[str, np.ndarray]:
    samples = {}
    for k, result in enumerate(results, start=1):
        clouds = (stream.inputs[k - 1], result.aligned, result.coarse, result.final)
        for kind, cloud in zip(SAMPLE_KINDS, clouds, strict=True):
            samples[f"frame_{k}_{kind}"] = np.asarray(cloud, dtype=np.float64)
    return samples


def evaluate(
    net: TemporalCompletionNet,
    manifest: DatasetManifest,
    mode: EvalMode | str,
    config: EvalConfig | None = None,
    *,
    limits: DisturbanceLimits | None = None,
    sweep_sizes: Sequence[int] = INPUT_SWEEP_SIZES,
) -> EvalReport:
    """Run one evaluation protocol on a test split.

    Parameters
    ----------
    net : TemporalCompletionNet
        Trained network.
    manifest : DatasetManifest
        Test split.
    mode : EvalMode or str
        ``percat``: single-frame CD per category. ``temporal``: CD per frame
        index with standard errors. ``consistency``: CD between neighboring
        refined outputs in groups of five frames, next to the same index
        for the accumulated inputs. ``ablation``: per-frame CD with and
        without refinement. ``alignment``: CD and EMD of aligned and raw
        inputs against the aligned ground truth, rotation (deg) and
        translation (m) errors. ``input-sweep``: per-frame CD for inputs
        reduced to fewer points and lifted back
        to the input size.
    config : EvalConfig, optional
        Protocol settings.
    limits : DisturbanceLimits, optional
        Disturbance bounds, by default those of the dataset.
    sweep_sizes : sequence of int, optional
        Kept point counts of the input sweep; sizes above the network input
        are skipped.

    Raises
    ------
    ConfigError
        If the mode is unknown.
    """
    try:
        mode = EvalMode(mode)
    except ValueError as e:
        msg = f"Unknown evaluation mode {mode!r}"
        raise ConfigError(msg) from e
    config = config or EvalConfig()
    limits = limits or manifest.config.limits
    frames = {
        EvalMode.PERCAT: 1,
        EvalMode.CONSISTENCY: config.consistency_frames,
    }.get(mode, config.frames)
    collector = _Collector()
    report = EvalReport()
    num_points = net.encoder_config.num_points
    for repeat in range(config.repeats):
        sweep: Sequence[int | None] = (
            [n for n in sweep_sizes if n <= num_points]
            if mode is EvalMode.INPUT_SWEEP
            else [None]
        )
        for keep in sweep:
            streams = build_streams(
                manifest,
                frames=frames,
                repeat=repeat,
                seed=config.seed,
                limits=limits,
                keep_points=None if keep == num_points else keep,
            )
            if not streams:
                continue
            method = METHOD_NAME if keep is None else f"{METHOD_NAME}-{keep}"
            results = run_streams(net, streams, batch_size=config.batch_size)
            if repeat == 0 and keep is None:
                report.samples = _sample_clouds(streams[0], results[0])
            _score(mode, collector, method, streams, results, repeat)
            if mode is EvalMode.ABLATION:
                bare = run_streams(net, streams, batch_size=config.batch_size, refine=False)
                for stream, outs in zip(streams, bare, strict=True):
                    for k, out in enumerate(outs, start=1):
                        cd = per_point_cd(out.final, stream.complete)
                        collector.add(NO_REFINE_METHOD, stream.category, k, "cd", cd)
    report.rows = collector.rows(
        with_stderr=mode in (EvalMode.TEMPORAL, EvalMode.CONSISTENCY)
    )
    _LOGGER.info("Evaluated %s: %s rows", mode, len(report.rows))
    return report


def _score(
    mode: EvalMode,
    collector: _Collector,
    method: str,
    streams: Sequence[EvalStream],
    results: Sequence[list[FrameResult]],
    repeat: int,
) -> None:
    for index, (stream, outs) in enumerate(zip(streams, results, strict=True)):
        category = stream.category
        match mode:
            case EvalMode.PERCAT:
                collector.add(method, category, 1, "cd", per_point_cd(outs[0].final, stream.complete))
            case EvalMode.TEMPORAL | EvalMode.ABLATION | EvalMode.INPUT_SWEEP:
                for k, out in enumerate(outs, start=1):
                    collector.add(method, category, k, "cd", per_point_cd(out.final, stream.complete))
            case EvalMode.CONSISTENCY:
                _score_consistency(collector, method, stream, outs, repeat, index)
            case EvalMode.ALIGNMENT:
                for k, out in enumerate(outs, start=1):
                    gt = stream.aligned_gt[k - 1]
                    raw = stream.inputs[k - 1].astype(np.float64)
                    inverse = stream.poses[k - 1].inverse()
                    for metric, value in (
                        ("cd_aligned", per_point_cd(out.aligned, gt)),
                        ("cd_input", per_point_cd(raw, gt)),
                        ("emd_aligned", float(emd(out.aligned, gt))),
                        ("emd_input", float(emd(raw, gt))),
                        ("rot_err_deg", rotation_angle_deg(out.rotation, inverse.rotation)),
                        (
                            "trans_err_m",
                            float(np.linalg.norm(out.translation - inverse.translation)),
                        ),
                    ):
                        collector.add(method, category, k, metric, value)


def _score_consistency(
    collector: _Collector,
    method: str,
    stream: EvalStream,
    outs: list[FrameResult],
    repeat: int,
    index: int,
) -> None:
    if len(outs) < CONSISTENCY_GROUP:
        _LOGGER.warning("Stream of %s frames is too short for consistency", len(outs))
        return
    groups = sequence_consistency([o.final for o in outs], CONSISTENCY_GROUP)
    rng = derived_rng(repeat, index, len(outs))
    accumulated = [
        accumulate_frames(
            stream.inputs[: k + 1], stream.poses[: k + 1], stream.complete.shape[0], rng
        )
        for k in range(len(outs))
    ]
    reference = sequence_consistency(accumulated, CONSISTENCY_GROUP)
    for g, (ours, theirs) in enumerate(zip(groups, reference, strict=True)):
        for j, (a, b) in enumerate(zip(ours, theirs, strict=True), start=1):
            frame = g * (CONSISTENCY_GROUP - 1) + j
            collector.add(method, stream.category, frame, "consistency", a)
            collector.add(ACCUMULATED_METHOD, stream.category, frame, "consistency", b)
