"""Virtual partial scans: hidden point removal from a viewpoint."""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING

import numpy as np

from .const import DEFAULT_NUM_POINTS
from .exceptions import EmptyInputError, PreconditionError

if TYPE_CHECKING:
    from .shapes import Shape

_LOGGER = logging.getLogger(__package__)


def camera_frame(viewpoint: np.ndarray) -> np.ndarray:
    """Rows right, up and forward of a camera at `viewpoint` looking at the origin."""
    forward = -viewpoint / np.linalg.norm(viewpoint)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.99:  # noqa: PLR2004
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    return np.stack([right, np.cross(right, forward), forward])


def visible_indices(
    shape: Shape,
    viewpoint: np.ndarray,
    *,
    image_size: int = 128,
    depth_tolerance: float = 0.01,
) -> np.ndarray:
    """Indices of the surface points seen from `viewpoint`.

    A point is visible if its normal faces the viewpoint and its depth is
    within `depth_tolerance` of the nearest depth in its pixel of a
    perspective image of ``image_size`` x ``image_size`` pixels.
    """
    facing = np.flatnonzero(((viewpoint - shape.points) * shape.normals).sum(-1) > 0)
    if facing.size == 0:
        return facing
    camera = (shape.points[facing] - viewpoint) @ camera_frame(viewpoint).T
    depth = camera[:, 2]
    projected = camera[:, :2] / depth[:, None]
    extent = max(float(np.abs(projected).max()), 1e-12)
    pixels = np.clip(
        np.rint((projected / extent * 0.5 + 0.5) * (image_size - 1)).astype(np.int64),
        0,
        image_size - 1,
    )
    flat = pixels[:, 1] * image_size + pixels[:, 0]
    zbuffer = np.full(image_size * image_size, np.inf)
    np.minimum.at(zbuffer, flat, depth)
    return facing[depth <= zbuffer[flat] + depth_tolerance]


def render_partial(
    shape: Shape,
    viewpoint: np.ndarray,
    rng: np.random.Generator,
    num_points: int = DEFAULT_NUM_POINTS,
    *,
    image_size: int = 128,
    depth_tolerance: float = 0.01,
) -> np.ndarray:
    """Randomly select `num_points` surface points visible from `viewpoint`.

    If fewer points are visible, visible points are selected again (no
    jitter) until the size is reached.

    Parameters
    ----------
    shape : Shape
        Normalized shape with surface samples and normals.
    viewpoint : numpy.ndarray
        Camera position, outside the shape.
    rng : numpy.random.Generator
        Source of the random selection.
    num_points : int, optional
        Output size, by default 2048.

    Returns
    -------
    numpy.ndarray
        Partial cloud (num_points, 3), a selection of ``shape.points``.

    Raises
    ------
    PreconditionError
        If the viewpoint is not outside the shape.
    EmptyInputError
        If no surface point is visible.
    """
    viewpoint = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    if float(shape.sdf(viewpoint)[0]) <= 0:
        msg = f"viewpoint {viewpoint.tolist()} is not outside the shape"
        raise PreconditionError(msg)
    visible = visible_indices(
        shape, viewpoint, image_size=image_size, depth_tolerance=depth_tolerance
    )
    if visible.size == 0:
        msg = "no surface point is visible from the viewpoint"
        raise EmptyInputError(msg)
    if visible.size >= num_points:
        selected = rng.choice(visible, size=num_points, replace=False)
    else:
        _LOGGER.warning(
            "Only %s of %s points visible, selecting duplicates", visible.size, num_points
        )
        extra = rng.choice(visible, size=num_points - visible.size, replace=True)
        selected = np.concatenate([rng.permutation(visible), extra])
    return shape.points[selected]
