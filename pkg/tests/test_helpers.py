"""Tests for helper functions."""

import math

import pytest

from tcomplete.helpers import derived_rng, mean, round_half_up, standard_error


@pytest.mark.parametrize(
    ("value", "expected"),
    [(6.635, "6.64"), (6.625, "6.63"), (2.0, "2.00"), (-1.005, "-1.01")],
)
def test_round_half_up(value: float, expected: str) -> None:
    """Test reported values round half up on their decimal form."""
    assert round_half_up(value) == expected


def test_mean_and_error() -> None:
    """Test summary statistics."""
    assert mean([7.24, 2.61, 8.14, 5.63, 7.11, 8.18, 7.27, 6.90]) == pytest.approx(6.635)
    assert math.isnan(mean([]))
    assert standard_error([1.0]) == 0.0
    assert standard_error([1.0, 3.0]) == pytest.approx(1.0)


def test_derived_rng() -> None:
    """Test generators depend only on their keys."""
    assert derived_rng(1, 2).integers(1 << 30) == derived_rng(1, 2).integers(1 << 30)
    assert derived_rng(1, 2).integers(1 << 30) != derived_rng(2, 1).integers(1 << 30)
