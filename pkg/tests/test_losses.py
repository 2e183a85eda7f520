"""Tests for losses and metrics."""

from itertools import permutations

import numpy as np
import pytest
import torch

from tcomplete import (
    EmptyInputError,
    LossWeights,
    SizeMismatchError,
    chamfer,
    emd,
    laplacian_loss,
    per_point_cd,
)
from tcomplete.exceptions import ConfigError, DegenerateInputError
from tcomplete.geometry import knn_adjacency, rotation_6d_to_matrix
from tcomplete.helpers import derived_rng
from tcomplete.losses import (
    alignment_loss,
    auction_assignment,
    exact_assignment,
    huber_translation,
    orthogonality_penalty,
    sequence_consistency,
    total_loss,
)

ORIGIN = np.zeros((1, 3))
UNIT_X = np.array([[1.0, 0, 0]])


def test_chamfer() -> None:
    """Test Chamfer distance on hand-computed clouds."""
    cloud = derived_rng(0).normal(size=(10, 3))

    assert float(chamfer(cloud, cloud)) == pytest.approx(0.0, abs=1e-12)
    assert float(chamfer(ORIGIN, UNIT_X)) == 2.0
    assert float(chamfer(np.vstack([ORIGIN, UNIT_X]), ORIGIN)) == 0.5
    assert per_point_cd(ORIGIN, UNIT_X) == pytest.approx(2e4)
    with pytest.raises(EmptyInputError):
        chamfer(np.zeros((0, 3)), ORIGIN)


def test_chamfer_batch() -> None:
    """Test batches average their per-cloud distances."""
    x = torch.zeros((2, 1, 3), dtype=torch.float64)
    y = torch.tensor([[[1.0, 0, 0]], [[0.0, 0, 0]]], dtype=torch.float64)

    assert chamfer(x, y, reduction="none").tolist() == [2.0, 0.0]
    assert float(chamfer(x, y)) == 1.0


def test_emd() -> None:
    """Test EMD on hand-computed clouds."""
    x = np.array([[0.0, 0, 0], [2, 0, 0]])
    y = np.array([[1.0, 0, 0], [3, 0, 0]])
    cloud = derived_rng(1).normal(size=(12, 3))

    assert float(emd(x, y)) == pytest.approx(1.0)
    assert float(emd(cloud, cloud[::-1].copy())) == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(SizeMismatchError):
        emd(x, y[:1])
    with pytest.raises(ConfigError):
        emd(x, y, method="greedy")


def test_emd_triangle_inequality() -> None:
    """Test EMD obeys the triangle inequality on random triples."""
    rng = derived_rng(20)

    for _ in range(50):
        x, y, z = (rng.normal(size=(12, 3)) for _ in range(3))
        assert float(emd(x, z)) <= float(emd(x, y)) + float(emd(y, z)) + 1e-9


@pytest.mark.parametrize("size", [12, 32])
def test_emd_permutation_invariance(size: int) -> None:
    """Test reordering either cloud leaves the exact EMD unchanged."""
    rng = derived_rng(21, size)
    x = rng.normal(size=(size, 3))
    y = rng.normal(size=(size, 3))
    base = float(emd(x, y, method="exact"))

    for _ in range(5):
        p = rng.permutation(size)
        q = rng.permutation(size)
        assert float(emd(x[p], y, method="exact")) == pytest.approx(base, abs=1e-12)
        assert float(emd(x, y[q], method="exact")) == pytest.approx(base, abs=1e-12)
        assert float(emd(x[p], y[q], method="exact")) == pytest.approx(base, abs=1e-12)
    assert float(emd(y, x, method="exact")) == pytest.approx(base, abs=1e-12)


def test_auction_against_brute_force() -> None:
    """Test the auction stays within 1% of the optimal bijection."""
    perms = np.array(list(permutations(range(8))))
    rng = derived_rng(2)
    for _ in range(25):
        cost = np.linalg.norm(
            rng.normal(size=(8, 1, 3)) - rng.normal(size=(1, 8, 3)), axis=-1
        )
        best = cost[np.arange(8), perms].sum(axis=1).min()
        approx = cost[np.arange(8), auction_assignment(cost)].sum()
        exact = cost[np.arange(8), exact_assignment(cost)].sum()
        assert exact == pytest.approx(best)
        assert best <= approx <= best * 1.01


def test_auction_large_is_bijection() -> None:
    """Test the auction returns a permutation on larger clouds."""
    rng = derived_rng(3)
    x = rng.normal(size=(64, 3))
    y = rng.normal(size=(64, 3))

    exact = float(emd(x, y, method="exact"))
    approx = float(emd(x, y, method="auction"))
    assert exact <= approx <= exact * 1.01


def test_emd_gradient() -> None:
    """Test EMD is differentiable with respect to the first cloud."""
    x = torch.tensor([[0.0, 0, 0], [2, 0, 0]], dtype=torch.float64, requires_grad=True)
    y = torch.tensor([[1.0, 0, 0], [3, 0, 0]], dtype=torch.float64)

    emd(x, y).backward()
    torch.testing.assert_close(
        x.grad, torch.tensor([[-0.5, 0, 0], [-0.5, 0, 0]], dtype=torch.float64)
    )


def _resolutions(n: int = 16) -> list[torch.Tensor]:
    cloud = torch.from_numpy(derived_rng(4).normal(size=(n, 3)))
    return [cloud, cloud[: n // 2], cloud[: n // 4]]


def test_alignment_loss_weights() -> None:
    """Test coarser resolutions count a third as much."""
    gt = _resolutions()
    shift = torch.tensor([0.3, 0.0, 0.0], dtype=torch.float64)

    assert float(alignment_loss(gt, gt)) == pytest.approx(0.0, abs=1e-12)
    half = [gt[0], gt[1] + shift, gt[2]]
    assert float(alignment_loss(half, gt)) == pytest.approx(0.1)
    full = [gt[0] + shift, gt[1], gt[2]]
    assert float(alignment_loss(full, gt)) == pytest.approx(0.3)
    with pytest.raises(SizeMismatchError):
        alignment_loss([gt[0], gt[1], gt[1]], [gt[0], gt[1], gt[1]])


def test_huber_translation() -> None:
    """Test the quadratic and linear branches."""
    target = torch.zeros((1, 3), dtype=torch.float64)

    assert float(huber_translation([target], target)) == 0.0
    one = torch.tensor([[1.0, 0, 0]], dtype=torch.float64)
    assert float(huber_translation([one], target, delta=2.0)) == pytest.approx(0.5)
    three = torch.tensor([[0.0, 3, 0]], dtype=torch.float64)
    assert float(huber_translation([three], target, delta=2.0)) == pytest.approx(4.0)
    assert float(huber_translation([one, three], target)) == pytest.approx(4.5)


def test_laplacian_pair() -> None:
    """Test two mutual neighbors contribute one each."""
    cloud = np.array([[0.0, 0, 0], [1, 0, 0]])
    graph = knn_adjacency(cloud, 1)

    assert float(laplacian_loss(cloud, graph, scale_invariant=False)) == pytest.approx(2.0)
    assert float(laplacian_loss(cloud, graph)) == pytest.approx(2.0)


def test_laplacian_symmetric_neighbors() -> None:
    """Test a point between symmetric neighbors contributes nothing."""
    cloud = np.array([[-1.0, 0, 0], [0, 0, 0], [1, 0, 0]])
    graph = knn_adjacency(cloud, 1)

    assert graph.neighbors(1).tolist() == [0, 2]
    # only the two end points contribute, 2 / 4 each
    assert float(laplacian_loss(cloud, graph, scale_invariant=False)) == pytest.approx(1.0)


def test_laplacian_scale_invariance() -> None:
    """Test uniform scaling leaves the scale-invariant loss unchanged."""
    cloud = derived_rng(5).normal(size=(20, 3))
    graph = knn_adjacency(cloud, 4)

    base = float(laplacian_loss(cloud, graph))
    assert float(laplacian_loss(3.0 * cloud, graph)) == pytest.approx(base)
    raw = float(laplacian_loss(cloud, graph, scale_invariant=False))
    assert float(laplacian_loss(3.0 * cloud, graph, scale_invariant=False)) == (
        pytest.approx(raw / 3.0)
    )


def test_laplacian_rigid_invariance() -> None:
    """Test rotating and translating the cloud leaves the loss unchanged."""
    rng = derived_rng(22)
    cloud = rng.normal(size=(30, 3))
    graph = knn_adjacency(cloud, 4)

    for scale_invariant in (True, False):
        base = float(laplacian_loss(cloud, graph, scale_invariant=scale_invariant))
        for _ in range(5):
            rotation = rotation_6d_to_matrix(rng.normal(size=6))
            moved = cloud @ rotation.T + rng.uniform(-2.0, 2.0, size=3)
            value = float(laplacian_loss(moved, graph, scale_invariant=scale_invariant))
            assert value == pytest.approx(base, rel=1e-9)


def test_laplacian_degenerate() -> None:
    """Test coincident neighbors raise unless skipped."""
    cloud = np.array([[0.0, 0, 0], [0, 0, 0], [1, 0, 0]])
    edges = np.array([[0, 1, 1, 2], [1, 0, 2, 1]])

    with pytest.raises(DegenerateInputError) as exc:
        laplacian_loss(cloud, edges)
    assert exc.value.index == 0
    value = laplacian_loss(cloud, edges, skip_degenerate=True)
    assert torch.isfinite(value)


def test_orthogonality_penalty() -> None:
    """Test the penalty vanishes on orthogonal matrices."""
    eye = torch.eye(4).expand(2, 4, 4)

    assert float(orthogonality_penalty(eye)) == 0.0
    assert float(orthogonality_penalty(2 * torch.eye(2)[None])) == pytest.approx(18.0)


def test_total_loss() -> None:
    """Test the weighted sum of the objective."""
    weights = LossWeights(alpha=1, beta=1, gamma=1)
    zero = total_loss(
        weights, emd_align=0, huber=0, cd_coarse=0, cd_final=0, laplacian=0
    )
    ones = total_loss(
        weights, emd_align=1, huber=1, cd_coarse=1, cd_final=1, laplacian=1
    )

    assert zero.total == 0.0
    assert ones.total == 5.0
    assert ones.recombine(weights) == ones.total


@pytest.mark.parametrize(
    "name", ["alpha", "beta", "gamma", "orthogonality", "consistency"]
)
def test_total_loss_linear_in_weight(name: str) -> None:
    """Test the total changes linearly with each weight for arbitrary parts."""
    rng = derived_rng(23)
    parts = dict(
        zip(
            (
                "emd_align",
                "huber",
                "cd_coarse",
                "cd_final",
                "laplacian",
                "orthogonality",
                "consistency",
            ),
            rng.uniform(0.0, 5.0, size=7).tolist(),
            strict=True,
        )
    )

    def total(weight: float) -> float:
        return total_loss(LossWeights(**{name: weight}), **parts).total

    slope = total(1.0) - total(0.0)
    for weight in (0.25, 2.5, 40.0):
        assert total(weight) == pytest.approx(total(0.0) + weight * slope, rel=1e-12)


def test_sequence_consistency() -> None:
    """Test consistency groups of five frames."""
    a = np.zeros((1, 3))
    b = np.array([[0.1, 0, 0]])
    cd = per_point_cd(a, b)

    assert sequence_consistency([a] * 5) == [[0.0] * 4]
    groups = sequence_consistency([a, b, a, b, a, b, a, b, a, b, a])
    assert len(groups) == 2
    assert groups[0] == pytest.approx([cd] * 4)
    with pytest.raises(SizeMismatchError):
        sequence_consistency([a] * 4)
