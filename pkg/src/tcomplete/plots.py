"""Raster plots of evaluation reports: cloud projections and per-frame curves."""

from __future__ import annotations

import asyncio
import logging
from pathlib import Path
import re
from typing import TYPE_CHECKING

import numpy as np
from PIL import Image, ImageDraw

from .const import NORMALIZATION_RADIUS
from .evaluate import SAMPLE_KINDS, EvalReport
from .exceptions import OutputExistsError, StorageError

if TYPE_CHECKING:
    from collections.abc import Sequence

_LOGGER = logging.getLogger(__package__)

BACKGROUND = (255, 255, 255)
FOREGROUND = (0, 0, 0)
PALETTE = (
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
    (227, 119, 194),
    (127, 127, 127),
)
_SAMPLE = re.compile(r"frame_(\d+)_(\w+)")


def scatter_panels(
    clouds: dict[str, np.ndarray], panel_size: int = 256, extent: float | None = None
) -> Image.Image:
    """Orthographic x/z projections of several clouds side by side.

    All panels share one scale. Without an `extent` it is fitted to the largest
    absolute x or z coordinate of the clouds, and never falls below the
    normalization radius. Points outside an explicit `extent` are dropped.
    """
    projections = [
        np.asarray(cloud, dtype=np.float64).reshape(-1, 3)[:, [0, 2]]
        for cloud in clouds.values()
    ]
    if extent is None:
        largest = max((float(np.abs(xy).max()) for xy in projections if xy.size), default=0.0)
        extent = 1.1 * max(largest, NORMALIZATION_RADIUS)
    image = Image.new("RGB", (panel_size * max(len(clouds), 1), panel_size + 16), BACKGROUND)
    draw = ImageDraw.Draw(image)
    for i, (title, xy) in enumerate(zip(clouds, projections, strict=True)):
        left = i * panel_size
        draw.rectangle([left, 16, left + panel_size - 1, panel_size + 15], outline=FOREGROUND)
        draw.text((left + 4, 2), title, fill=FOREGROUND)
        pixels = np.rint((xy / extent * 0.5 + 0.5) * (panel_size - 1)).astype(np.int64)
        inside = ((pixels >= 0) & (pixels < panel_size)).all(axis=1)
        if clipped := int((~inside).sum()):
            _LOGGER.warning("%s of %s points of %s fall outside the panel", clipped, len(xy), title)
        color = PALETTE[i % len(PALETTE)]
        for px, py in pixels[inside]:
            image.putpixel((left + int(px), 16 + panel_size - 1 - int(py)), color)
    return image


def curve_plot(
    series: dict[str, Sequence[tuple[int, float]]],
    title: str,
    size: tuple[int, int] = (480, 320),
) -> Image.Image:
    """Line plot of per-frame values, one line per series."""
    width, height = size
    margin = 40
    image = Image.new("RGB", size, BACKGROUND)
    draw = ImageDraw.Draw(image)
    draw.text((margin, 4), title, fill=FOREGROUND)
    points = [p for values in series.values() for p in values]
    if not points:
        return image
    frames = [f for f, _ in points]
    values = [v for _, v in points]
    f_lo, f_hi = min(frames), max(frames)
    v_lo, v_hi = min(values), max(values)
    f_span = max(f_hi - f_lo, 1)
    v_span = max(v_hi - v_lo, 1e-12)

    def to_pixel(frame: int, value: float) -> tuple[float, float]:
        x = margin + (frame - f_lo) / f_span * (width - 2 * margin)
        y = height - margin - (value - v_lo) / v_span * (height - 2 * margin)
        return x, y

    draw.line([(margin, margin), (margin, height - margin), (width - margin, height - margin)], fill=FOREGROUND)
    draw.text((4, margin - 6), f"{v_hi:.2f}", fill=FOREGROUND)
    draw.text((4, height - margin - 6), f"{v_lo:.2f}", fill=FOREGROUND)
    for frame in sorted(set(frames)):
        x, _ = to_pixel(frame, v_lo)
        draw.text((x - 3, height - margin + 4), str(frame), fill=FOREGROUND)
    for i, (name, values_of) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        line = [to_pixel(f, v) for f, v in sorted(values_of)]
        if len(line) > 1:
            draw.line(line, fill=color, width=2)
        for x, y in line:
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=color)
        draw.text((width - margin - 120, margin + 12 * i), name, fill=color)
    return image


def report_frames(report: EvalReport) -> list[int]:
    """Frames that have example clouds in the report."""
    return sorted({int(m.group(1)) for name in report.samples if (m := _SAMPLE.fullmatch(name))})


def build_plots(
    report: EvalReport, frames: Sequence[int] | None = None
) -> dict[str, Image.Image]:
    """Images of a report keyed by file name.

    One projection panel per requested frame with example clouds, and one
    curve per metric with more than one frame index.
    """
    images: dict[str, Image.Image] = {}
    available = report_frames(report)
    for frame in available if frames is None else [f for f in frames if f in available]:
        clouds = {
            kind: report.samples[f"frame_{frame}_{kind}"]
            for kind in SAMPLE_KINDS
            if f"frame_{frame}_{kind}" in report.samples
        }
        images[f"frame_{frame}.png"] = scatter_panels(clouds)
    for metric in report.metrics():
        rows = [r for r in report.rows if r.metric_name == metric]
        if len({r.frame_index for r in rows}) < 2:  # noqa: PLR2004
            continue
        series: dict[str, list[tuple[int, float]]] = {}
        for r in rows:
            series.setdefault(f"{r.method} / {r.category}", []).append((r.frame_index, r.value))
        images[f"curve_{metric}.png"] = curve_plot(series, metric)
    return images


async def write_plots(
    report: EvalReport,
    out_dir: Path | str,
    *,
    frames: Sequence[int] | None = None,
    force: bool = False,
) -> list[Path]:
    """Render the plots of a report into `out_dir`.

    An empty report writes nothing.

    Raises
    ------
    OutputExistsError
        If an image would be overwritten and `force` is not set.
    """
    if not report:
        _LOGGER.info("Report is empty, no plots written")
        return []
    out_dir = Path(out_dir)
    images = build_plots(report, frames)
    paths = [out_dir / name for name in images]
    if not force and (existing := [p for p in paths if p.exists()]):
        msg = f"{existing[0]} exists, use --force to overwrite"
        raise OutputExistsError(msg)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(e.strerror or "cannot create directory", out_dir) from e
    loop = asyncio.get_running_loop()
    try:
        await asyncio.gather(
            *(
                loop.run_in_executor(None, image.save, path)
                for path, image in zip(paths, images.values(), strict=True)
            )
        )
    except OSError as e:
        raise StorageError(e.strerror or "cannot write plot", out_dir) from e
    _LOGGER.info("Wrote %s plots to %s", len(paths), out_dir)
    return paths
