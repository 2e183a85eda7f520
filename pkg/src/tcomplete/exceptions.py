"""Exceptions for Tcomplete."""

from __future__ import annotations

from typing import TYPE_CHECKING, Self

if TYPE_CHECKING:
    from pathlib import Path


class TcompleteException(Exception):  # noqa: N818
    """Base class for Tcomplete errors."""

    exit_code: int = 1


class EmptyInputError(TcompleteException):
    """An operation received an empty point cloud."""

    exit_code = 3


class SizeMismatchError(TcompleteException):
    """Point counts, dimensions or sample sizes do not fit together."""

    exit_code = 3


class DegenerateInputError(TcompleteException):
    """Degenerate geometry, e.g. parallel 6D vectors or coincident neighbors."""

    exit_code = 3

    def __init__(self: Self, message: str, index: int) -> None:
        """Initialize the Exception."""
        self.index = index
        super().__init__(message)


class InvalidPoseError(TcompleteException):
    """A rotation matrix is not a proper rotation."""

    exit_code = 3


class OrderingError(TcompleteException):
    """Frames arrived out of order or a training stage prerequisite is missing."""

    exit_code = 3


class PreconditionError(TcompleteException):
    """A precondition of an operation does not hold."""

    exit_code = 3


class OutputExistsError(PreconditionError):
    """Refusing to overwrite existing output."""


class ConfigError(TcompleteException):
    """Invalid configuration value, family or mode."""

    exit_code = 1


class StorageError(TcompleteException):
    """Base class for file I/O errors."""

    exit_code = 2

    def __init__(self: Self, message: str, path: Path | str | None = None) -> None:
        """Initialize the Exception."""
        self.path = path
        super().__init__(f"{path}: {message}" if path is not None else message)


class PointFileError(StorageError):
    """Missing, truncated or corrupt point file."""


class CheckpointError(StorageError):
    """Missing or incompatible checkpoint."""


class SessionError(StorageError):
    """Missing or corrupt session file."""
