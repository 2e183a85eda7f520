"""Helper functions for Tcomplete."""

from __future__ import annotations

from decimal import ROUND_HALF_UP, Decimal
import math
from typing import TYPE_CHECKING

import numpy as np
import torch

if TYPE_CHECKING:
    from collections.abc import Iterable


def seed_everything(seed: int) -> np.random.Generator:
    """Seed torch and return a numpy generator for the same seed.

    Parameters
    ----------
    seed : int
        Seed shared by torch and numpy.

    Returns
    -------
    numpy.random.Generator
        A fresh generator seeded with `seed`.
    """
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def derived_rng(*keys: int) -> np.random.Generator:
    """Return a generator that depends only on the given integer keys.

    Used wherever a value must be reproducible regardless of call order, e.g.
    per shape, per epoch or per frame.

    Examples
    --------
    >>> derived_rng(7, 0, 3).integers(10) == derived_rng(7, 0, 3).integers(10)
    True
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def round_half_up(value: float, places: int = 2) -> str:
    """Format a float with half-up rounding of its shortest decimal form.

    Binary floats such as 6.635 sit just below their decimal value, so plain
    ``round`` or ``format`` would give 6.63.

    Parameters
    ----------
    value : float
        The value to format.
    places : int, optional
        Number of decimal places, by default 2.

    Returns
    -------
    str
        The rounded value.

    Examples
    --------
    >>> round_half_up(6.635)
    '6.64'
    """
    if not math.isfinite(value):
        return str(value)
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def mean(values: Iterable[float]) -> float:
    """Arithmetic mean using exactly rounded summation."""
    items = list(values)
    if not items:
        return math.nan
    return math.fsum(items) / len(items)


def standard_error(values: Iterable[float]) -> float:
    """Standard error of the mean (zero for fewer than two values)."""
    items = list(values)
    if len(items) < 2:  # noqa: PLR2004
        return 0.0
    avg = mean(items)
    variance = math.fsum((v - avg) ** 2 for v in items) / (len(items) - 1)
    return math.sqrt(variance / len(items))


def resolve_device(name: str | None = None) -> torch.device:
    """Return the requested torch device, defaulting to CPU."""
    return torch.device(name or "cpu")
