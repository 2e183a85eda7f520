"""Geometric primitives: sampling, grouping, graphs and rigid transforms.

Functions working on single clouds take and return numpy arrays in float64.
Their ``batched_*`` / tensor counterparts are what the networks use; they share
the same selection rules, so a single-cloud call is the batch-of-one case.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F

from .const import DEGENERATE_ANGLE
from .exceptions import (
    ConfigError,
    DegenerateInputError,
    EmptyInputError,
    SizeMismatchError,
)
from .types import AdjacencyGraph, DisturbanceLimits, RigidPose

_LOGGER = logging.getLogger(__package__)

_DEGENERATE_NORM = 1e-12


def as_cloud(points: np.ndarray | list, *, allow_empty: bool = False) -> np.ndarray:
    """Validate and convert a point cloud to an (N, 3) float64 array.

    Raises
    ------
    SizeMismatchError
        If the array is not of shape (N, 3).
    EmptyInputError
        If the cloud is empty and `allow_empty` is not set.
    """
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:  # noqa: PLR2004
        msg = f"Expected an (N, 3) point array, got shape {cloud.shape}"
        raise SizeMismatchError(msg)
    if not allow_empty and cloud.shape[0] == 0:
        msg = "Point cloud is empty"
        raise EmptyInputError(msg)
    return cloud


def gather_points(points: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Select points (B, N, C) by per-batch indices (B, ...) -> (B, ..., C)."""
    batch = points.shape[0]
    flat = indices.reshape(batch, -1)
    picked = torch.gather(
        points, 1, flat.unsqueeze(-1).expand(-1, -1, points.shape[-1])
    )
    return picked.reshape(*indices.shape, points.shape[-1])


def canonical_seed_index(points: torch.Tensor) -> torch.Tensor:
    """Index of the point nearest to the centroid, per batch element.

    The choice depends only on the point set, not on storage order (the lowest
    index wins exact ties).
    """
    with torch.no_grad():
        centered = points - points.mean(dim=1, keepdim=True)
        return torch.argmin(centered.square().sum(-1), dim=1)


def batched_farthest_point_sample(
    points: torch.Tensor,
    m: int,
    seed_indices: torch.Tensor | None = None,
) -> torch.Tensor:
    """Farthest point sampling over a batch of clouds.

    Parameters
    ----------
    points : torch.Tensor
        Clouds of shape (B, N, 3).
    m : int
        Number of points to select, 1 <= m <= N.
    seed_indices : torch.Tensor, optional
        First selected index per cloud, shape (B,). Defaults to index 0.

    Returns
    -------
    torch.Tensor
        Long tensor of shape (B, m). Every next index maximizes the distance to
        the already selected set; ties go to the lowest index.
    """
    batch, n, _ = points.shape
    if n == 0:
        msg = "Cannot sample from an empty cloud"
        raise EmptyInputError(msg)
    if not 1 <= m <= n:
        msg = f"Cannot sample {m} points from a cloud of {n}"
        raise SizeMismatchError(msg)
    device = points.device
    with torch.no_grad():
        selected = torch.empty((batch, m), dtype=torch.long, device=device)
        distance = torch.full((batch, n), torch.inf, dtype=points.dtype, device=device)
        rows = torch.arange(batch, device=device)
        current = (
            torch.zeros(batch, dtype=torch.long, device=device)
            if seed_indices is None
            else seed_indices.to(device=device, dtype=torch.long)
        )
        for i in range(m):
            selected[:, i] = current
            center = points[rows, current].unsqueeze(1)
            distance = torch.minimum(distance, (points - center).square().sum(-1))
            distance[rows, current] = -1.0
            # argmax returns the first maximal index
            current = torch.argmax(distance, dim=1)
    return selected


def farthest_point_sample(
    cloud: np.ndarray,
    m: int,
    seed_index: int = 0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Farthest point sampling of a single cloud.

    Parameters
    ----------
    cloud : numpy.ndarray
        Points of shape (N, 3).
    m : int
        Number of points to select.
    seed_index : int, optional
        First selected point, by default 0.
    rng : numpy.random.Generator, optional
        If given, the seed point is drawn uniformly instead.

    Returns
    -------
    numpy.ndarray
        Distinct int64 indices, starting with the seed.

    Raises
    ------
    EmptyInputError
        If the cloud is empty.
    SizeMismatchError
        If `m` is not in [1, N] or the seed index is out of range.

    Examples
    --------
    >>> farthest_point_sample(np.array([[0, 0, 0], [1, 0, 0], [10, 0, 0]]), 2)
    array([0, 2])
    """
    points = as_cloud(cloud)
    n = points.shape[0]
    if rng is not None:
        seed_index = int(rng.integers(n))
    if not 0 <= seed_index < n:
        msg = f"Seed index {seed_index} out of range for {n} points"
        raise SizeMismatchError(msg)
    tensor = torch.from_numpy(points).unsqueeze(0)
    seed = torch.tensor([seed_index], dtype=torch.long)
    return batched_farthest_point_sample(tensor, m, seed)[0].numpy()


def _check_ball(radius: float, cap: int) -> None:
    if radius <= 0 or cap < 1:
        msg = f"ball grouping needs radius > 0 and cap >= 1, got {radius} and {cap}"
        raise ConfigError(msg)


def ball_query(
    centers: np.ndarray,
    source: np.ndarray,
    radius: float,
    cap: int,
) -> list[np.ndarray]:
    """Nearest-first source indices within `radius` of each center.

    Each list holds at most `cap` entries. An empty ball falls back to the
    single nearest source point.

    Raises
    ------
    EmptyInputError
        If `source` is empty.
    ConfigError
        If `radius` is not positive or `cap` is below 1.
    """
    _check_ball(radius, cap)
    src = as_cloud(source)
    ctr = as_cloud(centers, allow_empty=True)
    result = []
    for center in ctr:
        dist = np.linalg.norm(src - center, axis=1)
        order = np.argsort(dist, kind="stable")
        inside = order[dist[order] <= radius][:cap]
        result.append(inside if inside.size else order[:1])
    return result


def ball_group(
    centers: torch.Tensor,
    source: torch.Tensor,
    radius: float,
    cap: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Padded tensor form of :func:`ball_query`.

    Parameters
    ----------
    centers : torch.Tensor
        Query points (B, M, 3).
    source : torch.Tensor
        Source clouds (B, S, 3).
    radius : float
        Ball radius.
    cap : int
        Maximum group size.

    Returns
    -------
    indices : torch.Tensor
        Long tensor (B, M, cap), nearest first. Slots beyond the ball repeat
        the nearest index.
    counts : torch.Tensor
        Number of source points inside each ball, before capping (B, M).

    Raises
    ------
    ConfigError
        If `radius` is not positive or `cap` is below 1.
    EmptyInputError
        If `source` holds no points.
    """
    _check_ball(radius, cap)
    if source.shape[1] == 0:
        msg = "Cannot group from an empty cloud"
        raise EmptyInputError(msg)
    with torch.no_grad():
        dist = torch.cdist(centers, source)
        counts = (dist <= radius).sum(-1)
        k = min(cap, source.shape[1])
        near_dist, near_idx = torch.topk(dist, k, dim=-1, largest=False, sorted=True)
        nearest = near_idx[..., :1]
        indices = torch.where(near_dist <= radius, near_idx, nearest)
        if k < cap:
            indices = torch.cat(
                [indices, nearest.expand(*nearest.shape[:-1], cap - k)], dim=-1
            )
    return indices, counts


def knn_adjacency(cloud: np.ndarray, k: int) -> AdjacencyGraph:
    """Symmetrized k-nearest-neighbor graph of a cloud.

    Every node links to its `k` nearest neighbors (lowest index on ties); each
    link is then added in both directions. Self-loops never occur.

    Raises
    ------
    SizeMismatchError
        If `k` is not in [1, N).
    """
    points = as_cloud(cloud)
    n = points.shape[0]
    if not 1 <= k < n:
        msg = f"k must be in [1, {n}), got {k}"
        raise SizeMismatchError(msg)
    dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    np.fill_diagonal(dist, np.inf)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    source = np.repeat(np.arange(n), k)
    target = nearest.reshape(-1)
    pairs = np.concatenate(
        [np.stack([source, target]), np.stack([target, source])], axis=1
    )
    return AdjacencyGraph(node_count=n, edge_index=np.unique(pairs, axis=1))


def knn_edges(points: torch.Tensor, k: int) -> torch.Tensor:
    """Symmetrized k-NN edges over a batch, as indices into the flattened B*N nodes.

    Returns
    -------
    torch.Tensor
        Long tensor (2, E) of directed (source, target) pairs, sorted and
        without duplicates.
    """
    batch, n, _ = points.shape
    if not 1 <= k < n:
        msg = f"k must be in [1, {n}), got {k}"
        raise SizeMismatchError(msg)
    with torch.no_grad():
        dist = torch.cdist(points, points)
        dist.diagonal(dim1=1, dim2=2).fill_(torch.inf)
        nearest = torch.topk(dist, k, dim=-1, largest=False).indices
        offset = (torch.arange(batch, device=points.device) * n).view(batch, 1, 1)
        source = (
            torch.arange(n, device=points.device).view(1, n, 1).expand(batch, n, k)
            + offset
        ).reshape(-1)
        target = (nearest + offset).reshape(-1)
        pairs = torch.cat(
            [torch.stack([source, target]), torch.stack([target, source])], dim=1
        )
        return torch.unique(pairs, dim=1)


def rotation_6d_to_matrix(r: np.ndarray) -> np.ndarray:
    """Convert a 6D rotation to a rotation matrix by Gram-Schmidt.

    The two 3-vectors become the first two columns after orthonormalization;
    the third column is their cross product.

    Raises
    ------
    DegenerateInputError
        If a vector is zero (``index`` 0 or 1) or the two are parallel
        (``index`` 1).

    Examples
    --------
    >>> rotation_6d_to_matrix(np.array([2, 0, 0, 0, 3, 0]))
    array([[1., 0., 0.],
           [0., 1., 0.],
           [0., 0., 1.]])
    """
    vec = np.asarray(r, dtype=np.float64).reshape(6)
    v1, v2 = vec[:3], vec[3:]
    for index, v in enumerate((v1, v2)):
        if np.linalg.norm(v) < _DEGENERATE_NORM:
            msg = f"6D rotation vector {index} is zero"
            raise DegenerateInputError(msg, index=index)
    angle = np.arctan2(np.linalg.norm(np.cross(v1, v2)), abs(float(v1 @ v2)))
    if angle <= DEGENERATE_ANGLE:
        msg = "6D rotation vectors are parallel"
        raise DegenerateInputError(msg, index=1)
    b1 = v1 / np.linalg.norm(v1)
    u2 = v2 - (v2 @ b1) * b1
    b2 = u2 / np.linalg.norm(u2)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def rotation_6d_to_matrix_batch(r: torch.Tensor) -> torch.Tensor:
    """Differentiable Gram-Schmidt for a batch of 6D rotations (B, 6) -> (B, 3, 3)."""
    v1, v2 = r[..., :3], r[..., 3:]
    b1 = F.normalize(v1, dim=-1)
    b2 = F.normalize(v2 - (b1 * v2).sum(-1, keepdim=True) * b1, dim=-1)
    # second pass keeps b2 orthogonal in float32 for nearly parallel input
    b2 = F.normalize(b2 - (b1 * b2).sum(-1, keepdim=True) * b1, dim=-1)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def sanitize_rotation_6d(r: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Move degenerate 6D predictions to the nearest usable ones.

    A zero first vector is nudged along x; a second vector that is zero or
    parallel to the first is perturbed by 1e-6 (relative) along a direction
    orthogonal to the first.

    Returns
    -------
    tuple of (torch.Tensor, int)
        The sanitized predictions and the number of rows that were changed.
    """
    with torch.no_grad():
        v1, v2 = r[..., :3], r[..., 3:]
        n1 = v1.norm(dim=-1)
        n2 = v2.norm(dim=-1)
        cross = torch.linalg.cross(v1, v2, dim=-1).norm(dim=-1)
        dot = (v1 * v2).sum(-1).abs()
        bad_first = n1 < _DEGENERATE_NORM
        bad_second = (n2 < _DEGENERATE_NORM) | (
            torch.atan2(cross, dot) <= DEGENERATE_ANGLE
        )
        count = int((bad_first | bad_second).sum())
    if count == 0:
        return r, 0
    eye = torch.eye(3, dtype=r.dtype, device=r.device)
    v1 = torch.where(bad_first.unsqueeze(-1), v1 + 1e-6 * eye[0], r[..., :3])
    with torch.no_grad():
        b1 = F.normalize(v1, dim=-1)
        axis = eye[torch.argmin(b1.abs(), dim=-1)]
        fallback = F.normalize(torch.linalg.cross(b1, axis, dim=-1), dim=-1)
        perp = v2 - (v2 * b1).sum(-1, keepdim=True) * b1
        use_perp = perp.norm(dim=-1, keepdim=True) > _DEGENERATE_NORM
        direction = torch.where(use_perp, F.normalize(perp, dim=-1), fallback)
        shift = 1e-6 * (n2.unsqueeze(-1) + 1.0) * direction
    v2 = torch.where(bad_second.unsqueeze(-1), v2 + shift, v2)
    _LOGGER.warning("Sanitized %s degenerate 6D rotation prediction(s)", count)
    return torch.cat([v1, v2], dim=-1), count


def euler_to_matrix(angles: np.ndarray) -> np.ndarray:
    """Rotation about x, then y, then z: R = Rz @ Ry @ Rx (angles in radians)."""
    ax, ay, az = (float(a) for a in np.asarray(angles, dtype=np.float64).reshape(3))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def matrix_to_euler(rotation: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix` for |y angle| < 90 degrees."""
    rot = np.asarray(rotation, dtype=np.float64)
    ay = -np.arcsin(np.clip(rot[2, 0], -1.0, 1.0))
    ax = np.arctan2(rot[2, 1], rot[2, 2])
    az = np.arctan2(rot[1, 0], rot[0, 0])
    return np.array([ax, ay, az])


def rotation_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    relative = np.asarray(a, dtype=np.float64).T @ np.asarray(b, dtype=np.float64)
    cosine = np.clip((np.trace(relative) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cosine)))


def apply_pose(cloud: np.ndarray, pose: RigidPose) -> np.ndarray:
    """Rigidly move a cloud, p' = R p + t, preserving point order."""
    return as_cloud(cloud, allow_empty=True) @ pose.rotation.T + pose.translation


def sample_disturbance(
    rng: np.random.Generator, limits: DisturbanceLimits | None = None
) -> RigidPose:
    """Draw a random pose within the per-axis limits.

    Euler angles and translation components are uniform within
    [-limit, limit]; rotation is composed x, then y, then z.
    """
    limits = limits or DisturbanceLimits()
    max_rad = np.radians(limits.max_rot_deg)
    angles = rng.uniform(-max_rad, max_rad, size=3)
    translation = rng.uniform(-limits.max_trans_m, limits.max_trans_m, size=3)
    return RigidPose(rotation=euler_to_matrix(angles), translation=translation)
