"""Point cloud files: ASCII XYZ and the little-endian PCB1 binary format.

PCB1 layout: the magic bytes ``PCB1``, a ``<u4`` point count, then
count x 3 ``<f4`` coordinates.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .const import POINT_FILE_MAGIC
from .exceptions import PointFileError

_HEADER = np.dtype([("magic", "S4"), ("count", "<u4")])
SUFFIXES = (".xyz", ".pcb")


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as e:
        raise PointFileError(e.strerror or "cannot read file", path) from e


def _checked(points: np.ndarray, path: Path) -> np.ndarray:
    if not np.isfinite(points).all():
        msg = "non-finite coordinate"
        raise PointFileError(msg, path)
    return points


def read_pcb(path: Path | str) -> np.ndarray:
    """Read a PCB1 file into an (N, 3) float32 array."""
    path = Path(path)
    data = _read_bytes(path)
    if len(data) < _HEADER.itemsize:
        msg = "truncated header"
        raise PointFileError(msg, path)
    header = np.frombuffer(data, dtype=_HEADER, count=1)[0]
    if header["magic"] != POINT_FILE_MAGIC:
        msg = "not a PCB1 file"
        raise PointFileError(msg, path)
    count = int(header["count"])
    expected = _HEADER.itemsize + count * 12
    if len(data) != expected:
        msg = f"expected {expected} bytes for {count} points, found {len(data)}"
        raise PointFileError(msg, path)
    if count == 0:
        return np.zeros((0, 3), dtype=np.float32)
    points = np.frombuffer(data, dtype="<f4", offset=_HEADER.itemsize)
    return _checked(points.reshape(count, 3).astype(np.float32), path)


def write_pcb(path: Path | str, points: np.ndarray) -> None:
    """Write an (N, 3) cloud as PCB1, storing coordinates as float32."""
    coords = np.ascontiguousarray(np.asarray(points).reshape(-1, 3), dtype="<f4")
    header = np.array([(POINT_FILE_MAGIC, coords.shape[0])], dtype=_HEADER)
    path = Path(path)
    try:
        path.write_bytes(header.tobytes() + coords.tobytes())
    except OSError as e:
        raise PointFileError(e.strerror or "cannot write file", path) from e


def read_xyz(path: Path | str) -> np.ndarray:
    """Read an ASCII XYZ file into an (N, 3) float64 array.

    Each non-empty line holds three whitespace-separated floats; ``#`` starts
    a comment.
    """
    path = Path(path)
    try:
        text = _read_bytes(path).decode("utf-8")
    except UnicodeDecodeError as e:
        msg = "not a text file"
        raise PointFileError(msg, path) from e
    rows: list[list[float]] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:  # noqa: PLR2004
            msg = f"line {number}: expected 3 values, found {len(fields)}"
            raise PointFileError(msg, path)
        try:
            rows.append([float(v) for v in fields])
        except ValueError as e:
            msg = f"line {number}: {e}"
            raise PointFileError(msg, path) from e
    return _checked(np.array(rows, dtype=np.float64).reshape(-1, 3), path)


def write_xyz(path: Path | str, points: np.ndarray, comment: str | None = None) -> None:
    """Write an (N, 3) cloud as ASCII XYZ with round-trip float formatting."""
    lines = [f"# {comment}"] if comment else []
    lines.extend(
        " ".join(repr(float(v)) for v in row)
        for row in np.asarray(points, dtype=np.float64).reshape(-1, 3)
    )
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise PointFileError(e.strerror or "cannot write file", path) from e


def read_points(path: Path | str) -> np.ndarray:
    """Read a point file, choosing the format by suffix (.xyz or .pcb)."""
    path = Path(path)
    match path.suffix.lower():
        case ".pcb":
            return read_pcb(path)
        case ".xyz":
            return read_xyz(path)
    msg = f"unsupported point file suffix {path.suffix!r}"
    raise PointFileError(msg, path)


def write_points(path: Path | str, points: np.ndarray) -> None:
    """Write a point file, choosing the format by suffix (.xyz or .pcb)."""
    path = Path(path)
    match path.suffix.lower():
        case ".pcb":
            write_pcb(path, points)
            return
        case ".xyz":
            write_xyz(path, points)
            return
    msg = f"unsupported point file suffix {path.suffix!r}"
    raise PointFileError(msg, path)
