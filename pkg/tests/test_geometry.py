"""Tests for geometric primitives."""

import numpy as np
import pytest
import torch

from tcomplete import (
    DisturbanceLimits,
    EmptyInputError,
    RigidPose,
    SizeMismatchError,
)
from tcomplete.exceptions import ConfigError, DegenerateInputError
from tcomplete.geometry import (
    apply_pose,
    ball_group,
    ball_query,
    batched_farthest_point_sample,
    canonical_seed_index,
    euler_to_matrix,
    farthest_point_sample,
    knn_adjacency,
    knn_edges,
    matrix_to_euler,
    rotation_6d_to_matrix,
    rotation_6d_to_matrix_batch,
    rotation_angle_deg,
    sample_disturbance,
    sanitize_rotation_6d,
)
from tcomplete.helpers import derived_rng


def test_fps_colinear() -> None:
    """Test the farthest point follows the seed."""
    cloud = np.array([[0.0, 0, 0], [1, 0, 0], [10, 0, 0]])

    assert farthest_point_sample(cloud, 2).tolist() == [0, 2]
    assert farthest_point_sample(cloud, 1, seed_index=1).tolist() == [1]


def test_fps_full_is_permutation() -> None:
    """Test sampling all points returns every index once."""
    cloud = derived_rng(1).normal(size=(20, 3))

    indices = farthest_point_sample(cloud, 20, seed_index=5)
    assert sorted(indices.tolist()) == list(range(20))
    assert indices[0] == 5


def test_fps_errors() -> None:
    """Test invalid sample sizes."""
    with pytest.raises(SizeMismatchError):
        farthest_point_sample(np.zeros((3, 3)), 4)
    with pytest.raises(EmptyInputError):
        farthest_point_sample(np.zeros((0, 3)), 1)


def test_batched_fps_matches_single() -> None:
    """Test the batched sampler picks the same points as the single-cloud one."""
    clouds = derived_rng(2).normal(size=(3, 16, 3))
    seeds = canonical_seed_index(torch.from_numpy(clouds))

    batched = batched_farthest_point_sample(torch.from_numpy(clouds), 6, seeds)
    for b in range(3):
        single = farthest_point_sample(clouds[b], 6, seed_index=int(seeds[b]))
        assert batched[b].tolist() == single.tolist()


def test_canonical_seed_ignores_order() -> None:
    """Test the seed point does not depend on storage order."""
    cloud = derived_rng(3).normal(size=(12, 3))
    perm = derived_rng(4).permutation(12)

    seed = int(canonical_seed_index(torch.from_numpy(cloud[None]))[0])
    shuffled = int(canonical_seed_index(torch.from_numpy(cloud[perm][None]))[0])
    np.testing.assert_array_equal(cloud[seed], cloud[perm][shuffled])


def test_ball_query() -> None:
    """Test grouping inside a radius and the nearest-point fallback."""
    source = np.array([[0.1, 0, 0], [0.5, 0, 0]])

    assert ball_query(np.zeros((1, 3)), source, 0.2, 4)[0].tolist() == [0]
    assert ball_query(np.array([[0.45, 0, 0]]), source, 0.01, 4)[0].tolist() == [1]
    assert ball_query(np.array([[0.5, 0, 0]]), source, 1.0, 1)[0].tolist() == [1]
    with pytest.raises(EmptyInputError):
        ball_query(np.zeros((1, 3)), np.zeros((0, 3)), 0.2, 4)


@pytest.mark.parametrize(("radius", "cap"), [(0.0, 4), (-0.1, 4), (0.2, 0)])
def test_ball_parameters(radius: float, cap: int) -> None:
    """Test invalid radius or cap is a configuration error."""
    source = np.array([[0.1, 0, 0], [0.5, 0, 0]])

    with pytest.raises(ConfigError):
        ball_query(np.zeros((1, 3)), source, radius, cap)
    with pytest.raises(ConfigError):
        ball_group(torch.zeros((1, 1, 3)), torch.from_numpy(source[None]), radius, cap)


def test_ball_group_pads_with_nearest() -> None:
    """Test the tensor form repeats the nearest index past the ball."""
    source = torch.tensor([[[0.1, 0, 0], [0.5, 0, 0], [0.9, 0, 0]]])
    centers = torch.zeros((1, 1, 3))

    indices, counts = ball_group(centers, source, 0.2, 4)
    assert indices.tolist() == [[[0, 0, 0, 0]]]
    assert counts.tolist() == [[1]]

    indices, counts = ball_group(centers, source, 0.6, 2)
    assert indices.tolist() == [[[0, 1]]]
    assert counts.tolist() == [[2]]


def test_knn_adjacency() -> None:
    """Test symmetrized neighborhoods."""
    pair = knn_adjacency(np.array([[0.0, 0, 0], [1, 0, 0]]), 1)
    assert pair.edge_index.T.tolist() == [[0, 1], [1, 0]]

    line = knn_adjacency(np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]]), 1)
    assert line.neighbors(0).tolist() == [1]
    assert line.neighbors(1).tolist() == [0, 2]
    assert line.neighbors(2).tolist() == [1]

    with pytest.raises(SizeMismatchError):
        knn_adjacency(np.zeros((2, 3)), 2)


def test_knn_grid_degree() -> None:
    """Test every node of a grid has at least k neighbors and no self-loops."""
    grid = np.array([[x, y, 0.0] for x in range(4) for y in range(4)])

    graph = knn_adjacency(grid, 4)
    assert (graph.degrees() >= 4).all()
    assert not (graph.edge_index[0] == graph.edge_index[1]).any()


def test_knn_edges_matches_adjacency() -> None:
    """Test the batched edges offset each cloud by its node count."""
    clouds = derived_rng(5).normal(size=(2, 10, 3))

    edges = knn_edges(torch.from_numpy(clouds), 3)
    for b in range(2):
        graph = knn_adjacency(clouds[b], 3)
        mine = edges[:, (edges[0] >= b * 10) & (edges[0] < (b + 1) * 10)] - b * 10
        assert sorted(map(tuple, mine.T.tolist())) == sorted(
            map(tuple, graph.edge_index.T.tolist())
        )


@pytest.mark.parametrize(
    ("r", "expected"),
    [
        ([1, 0, 0, 0, 1, 0], np.eye(3)),
        ([2, 0, 0, 0, 3, 0], np.eye(3)),
        ([0, 1, 0, 0, 0, 1], np.array([[0.0, 0, 1], [1, 0, 0], [0, 1, 0]])),
    ],
)
def test_rotation_6d(r: list[int], expected: np.ndarray) -> None:
    """Test Gram-Schmidt conversion of 6D rotations."""
    rotation = rotation_6d_to_matrix(np.array(r))

    np.testing.assert_allclose(rotation, expected, atol=1e-12)
    assert np.linalg.det(rotation) == pytest.approx(1.0)


@pytest.mark.parametrize(
    ("r", "index"),
    [
        ([0, 0, 0, 0, 1, 0], 0),
        ([1, 0, 0, 0, 0, 0], 1),
        ([1, 0, 0, 2, 0, 0], 1),
    ],
)
def test_rotation_6d_degenerate(r: list[int], index: int) -> None:
    """Test degenerate 6D rotations name the offending vector."""
    with pytest.raises(DegenerateInputError) as exc:
        rotation_6d_to_matrix(np.array(r))
    assert exc.value.index == index


def test_rotation_6d_random_inputs() -> None:
    """Test random 6D inputs give proper rotations that ignore positive scale."""
    rng = derived_rng(10)
    vectors = rng.normal(size=(10_000, 6))
    scales = rng.uniform(0.01, 100.0, size=10_000)

    for r, s in zip(vectors, scales, strict=True):
        rotation = rotation_6d_to_matrix(r)
        assert np.abs(rotation.T @ rotation - np.eye(3)).max() < 1e-5
        assert abs(np.linalg.det(rotation) - 1.0) < 1e-5
        np.testing.assert_allclose(rotation_6d_to_matrix(s * r), rotation, rtol=0, atol=1e-9)


def test_rotation_6d_batch_is_orthonormal() -> None:
    """Test the differentiable conversion yields proper rotations."""
    r = torch.from_numpy(derived_rng(6).normal(size=(10_000, 6)))

    rotations = rotation_6d_to_matrix_batch(r)
    eye = torch.eye(3, dtype=r.dtype).expand(10_000, 3, 3)
    torch.testing.assert_close(rotations.transpose(1, 2) @ rotations, eye)
    torch.testing.assert_close(
        torch.linalg.det(rotations), torch.ones(10_000, dtype=r.dtype)
    )
    torch.testing.assert_close(rotation_6d_to_matrix_batch(7.5 * r), rotations)
    np.testing.assert_allclose(
        rotations[0].numpy(), rotation_6d_to_matrix(r[0].numpy()), atol=1e-12
    )


def test_sanitize_rotation_6d() -> None:
    """Test degenerate predictions are nudged and counted."""
    r = torch.tensor([[1.0, 0, 0, 0, 1, 0], [1.0, 0, 0, 2, 0, 0], [0.0, 0, 0, 0, 0, 0]])

    fixed, count = sanitize_rotation_6d(r)
    assert count == 2
    torch.testing.assert_close(fixed[0], r[0])
    assert torch.isfinite(rotation_6d_to_matrix_batch(fixed)).all()

    untouched, none = sanitize_rotation_6d(r[:1])
    assert none == 0
    assert torch.equal(untouched, r[:1])


def test_euler_round_trip() -> None:
    """Test Euler angles survive a matrix round trip."""
    angles = np.radians([10.0, -15.0, 20.0])

    np.testing.assert_allclose(matrix_to_euler(euler_to_matrix(angles)), angles)


def test_pose_inverse() -> None:
    """Test a pose followed by its inverse restores the cloud."""
    cloud = derived_rng(7).normal(size=(50, 3))
    pose = sample_disturbance(derived_rng(8))

    np.testing.assert_allclose(apply_pose(cloud, RigidPose.identity()), cloud)
    np.testing.assert_allclose(
        apply_pose(apply_pose(cloud, pose), pose.inverse()), cloud, atol=1e-9
    )
    assert rotation_angle_deg(pose.compose(pose.inverse()).rotation, np.eye(3)) == (
        pytest.approx(0.0, abs=1e-5)
    )


def test_disturbance_bounds() -> None:
    """Test sampled disturbances stay within their limits."""
    rng = derived_rng(9)
    limits = DisturbanceLimits()

    for _ in range(10_000):
        pose = sample_disturbance(rng, limits)
        assert np.abs(np.degrees(matrix_to_euler(pose.rotation))).max() <= 20.0 + 1e-9
        assert np.abs(pose.translation).max() <= 0.1

    zero = sample_disturbance(rng, DisturbanceLimits(max_rot_deg=0, max_trans_m=0))
    np.testing.assert_array_equal(zero.rotation, np.eye(3))
    np.testing.assert_array_equal(zero.translation, np.zeros(3))

    assert np.array_equal(
        sample_disturbance(derived_rng(3)).rotation,
        sample_disturbance(derived_rng(3)).rotation,
    )
