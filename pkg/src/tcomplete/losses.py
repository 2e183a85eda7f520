"""Training losses and evaluation metrics.

Every loss accepts a single cloud (N, 3) or a batch (B, N, 3); batched
inputs are averaged over the batch.
"""

from __future__ import annotations

from collections.abc import Sequence
import logging
from typing import Literal

import numpy as np
from scipy.optimize import linear_sum_assignment
import torch

from .const import (
    CD_REPORT_SCALE,
    CONSISTENCY_GROUP,
    DEGENERATE_EDGE,
    EMD_TOLERANCE,
    EXACT_EMD_MAX_POINTS,
)
from .exceptions import (
    ConfigError,
    DegenerateInputError,
    EmptyInputError,
    SizeMismatchError,
)
from .geometry import gather_points
from .types import AdjacencyGraph, LossReport, LossWeights

_LOGGER = logging.getLogger(__package__)

type EmdMethod = Literal["auto", "exact", "auction"]
type Reduction = Literal["mean", "none"]

AUCTION_PHASE_BUDGET = 50_000


def as_points(points: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Return points as a tensor; numpy input becomes float64."""
    if isinstance(points, torch.Tensor):
        return points
    return torch.from_numpy(np.asarray(points, dtype=np.float64))


def _batched(points: torch.Tensor | np.ndarray) -> tuple[torch.Tensor, bool]:
    tensor = as_points(points)
    if tensor.dim() == 2:  # noqa: PLR2004
        return tensor.unsqueeze(0), True
    return tensor, False


def _reduce(values: torch.Tensor, unbatched: bool, reduction: Reduction) -> torch.Tensor:  # noqa: FBT001
    if unbatched:
        return values[0]
    return values.mean() if reduction == "mean" else values


def safe_norm(vectors: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm whose gradient is zero (not NaN) at the origin."""
    squared = vectors.square().sum(dim)
    positive = squared > 0
    ones = torch.ones_like(squared)
    return torch.where(positive, torch.where(positive, squared, ones).sqrt(), 0.0)


def square_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Pairwise squared distances (B, N, M) between (B, N, 3) and (B, M, 3)."""
    cross = x @ y.transpose(-1, -2)
    norms = x.square().sum(-1).unsqueeze(-1) + y.square().sum(-1).unsqueeze(-2)
    return (norms - 2.0 * cross).clamp_min(0.0)


def chamfer(
    x: torch.Tensor | np.ndarray,
    y: torch.Tensor | np.ndarray,
    reduction: Reduction = "mean",
) -> torch.Tensor:
    """Bi-directional Chamfer distance on squared Euclidean distances.

    ``mean_x min_y |x - y|^2 + mean_y min_x |y - x|^2``

    Examples
    --------
    >>> float(chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])))
    2.0
    """
    xb, unbatched = _batched(x)
    yb, _ = _batched(y)
    if xb.shape[1] == 0 or yb.shape[1] == 0:
        msg = "Chamfer distance of an empty cloud"
        raise EmptyInputError(msg)
    dist = square_distance(xb, yb)
    value = dist.min(dim=2).values.mean(-1) + dist.min(dim=1).values.mean(-1)
    return _reduce(value, unbatched, reduction)


def per_point_cd(x: torch.Tensor | np.ndarray, y: torch.Tensor | np.ndarray) -> float:
    """Chamfer distance in the x10^4 reporting convention."""
    with torch.no_grad():
        return float(chamfer(as_points(x).double(), as_points(y).double())) * (
            CD_REPORT_SCALE
        )


def _auction_phase(
    benefit: np.ndarray, prices: np.ndarray, eps: float
) -> np.ndarray | None:
    n = benefit.shape[0]
    person_to_object = np.full(n, -1)
    object_to_person = np.full(n, -1)
    for _ in range(AUCTION_PHASE_BUDGET):
        unassigned = np.flatnonzero(person_to_object < 0)
        if unassigned.size == 0:
            return person_to_object
        values = benefit[unassigned] - prices
        rows = np.arange(unassigned.size)
        best = np.argmax(values, axis=1)
        best_value = values[rows, best]
        values[rows, best] = -np.inf
        bids = best_value - values.max(axis=1) + eps
        # per object: highest bid wins, lowest person index on ties
        order = np.lexsort((unassigned, -bids, best))
        sorted_objects = best[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = sorted_objects[1:] != sorted_objects[:-1]
        winners = order[first]
        objects = best[winners]
        persons = unassigned[winners]
        previous = object_to_person[objects]
        person_to_object[previous[previous >= 0]] = -1
        object_to_person[objects] = persons
        person_to_object[persons] = objects
        prices[objects] += bids[winners]
    return None


def auction_assignment(cost: np.ndarray, tolerance: float = EMD_TOLERANCE) -> np.ndarray:
    """Approximate minimum-cost assignment by epsilon-scaled auction.

    The final epsilon is ``tolerance`` times the mean row minimum of `cost`, a
    lower bound of the optimal mean cost, so the returned assignment has a
    mean cost within a relative ``tolerance`` of the optimum. Falls back to
    the exact solver if a phase does not converge.

    Returns
    -------
    numpy.ndarray
        Column assigned to each row.
    """
    n = cost.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    lower_bound = float(cost.min(axis=1).mean())
    if not lower_bound > 0:
        return exact_assignment(cost)
    eps_final = tolerance * lower_bound
    benefit = -cost
    prices = np.zeros(n)
    eps = max(float(cost.max() - cost.min()) / 4.0, eps_final)
    while True:
        assignment = _auction_phase(benefit, prices, eps)
        if assignment is None:
            _LOGGER.warning(
                "Auction did not converge for %s points, using the exact solver", n
            )
            return exact_assignment(cost)
        if eps <= eps_final:
            return assignment
        eps = max(eps / 5.0, eps_final)


def exact_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment (column per row) by the Hungarian method."""
    _, columns = linear_sum_assignment(cost)
    return columns.astype(np.int64)


def optimal_assignment(
    cost: np.ndarray,
    method: EmdMethod = "auto",
    tolerance: float = EMD_TOLERANCE,
) -> np.ndarray:
    """Assignment used by :func:`emd`: exact up to 16 points, auction above."""
    if method == "auto":
        method = "exact" if cost.shape[0] <= EXACT_EMD_MAX_POINTS else "auction"
    if method == "exact":
        return exact_assignment(cost)
    if method == "auction":
        return auction_assignment(cost, tolerance)
    msg = f"Unknown EMD method {method!r}"
    raise ConfigError(msg)


def emd(
    x: torch.Tensor | np.ndarray,
    y: torch.Tensor | np.ndarray,
    *,
    method: EmdMethod = "auto",
    tolerance: float = EMD_TOLERANCE,
    reduction: Reduction = "mean",
) -> torch.Tensor:
    """Earth mover distance: mean Euclidean distance under the best bijection.

    The assignment is computed without gradient and held constant, so the
    gradient is that of the matched mean distance.

    Raises
    ------
    SizeMismatchError
        If the clouds differ in size.
    EmptyInputError
        If the clouds are empty.

    Examples
    --------
    >>> float(emd(np.array([[0.0, 0, 0], [2, 0, 0]]), np.array([[1.0, 0, 0], [3, 0, 0]])))
    1.0
    """
    xb, unbatched = _batched(x)
    yb, _ = _batched(y)
    if xb.shape != yb.shape:
        msg = f"EMD needs equally sized clouds, got {tuple(xb.shape)} and {tuple(yb.shape)}"
        raise SizeMismatchError(msg)
    if xb.shape[1] == 0:
        msg = "EMD of empty clouds"
        raise EmptyInputError(msg)
    with torch.no_grad():
        cost = (
            torch.cdist(
                xb.double(), yb.double(), compute_mode="donot_use_mm_for_euclid_dist"
            )
            .cpu()
            .numpy()
        )
    assignment = np.stack(
        [optimal_assignment(c, method, tolerance) for c in cost]
    )
    matched = gather_points(yb, torch.from_numpy(assignment).to(yb.device))
    return _reduce(safe_norm(xb - matched).mean(-1), unbatched, reduction)


def alignment_loss(
    aligned: Sequence[torch.Tensor],
    gt_aligned: Sequence[torch.Tensor],
    weights: LossWeights | None = None,
    *,
    method: EmdMethod = "auto",
) -> torch.Tensor:
    """Weighted EMD between predicted and ground-truth aligned clouds.

    ``EMD_0 + lambda_1 EMD_1 + lambda_2 EMD_2`` over the resolutions N, N/2, N/4.
    """
    weights = weights or LossWeights()
    if len(aligned) != 3 or len(gt_aligned) != 3:  # noqa: PLR2004
        msg = "alignment_loss expects three resolutions"
        raise SizeMismatchError(msg)
    base = aligned[0].shape[-2]
    for level, (pred, gt) in enumerate(zip(aligned, gt_aligned, strict=True)):
        if pred.shape != gt.shape or pred.shape[-2] != base >> level:
            msg = f"resolution {level}: sizes {tuple(pred.shape)} and {tuple(gt.shape)}"
            raise SizeMismatchError(msg)
    terms = [
        emd(pred, gt, method=method)
        for pred, gt in zip(aligned, gt_aligned, strict=True)
    ]
    return sum(
        (w * t for w, t in zip(weights.resolution_weights, terms, strict=True)),
        start=torch.zeros((), dtype=terms[0].dtype, device=terms[0].device),
    )


def huber_translation(
    predictions: Sequence[torch.Tensor],
    target: torch.Tensor,
    delta: float = 2.0,
) -> torch.Tensor:
    """Huber loss on the norm of each predicted translation error, summed.

    ``0.5 e^2`` for ``e <= delta`` and ``delta (e - 0.5 delta)`` above.
    """
    total = torch.zeros((), dtype=target.dtype, device=target.device)
    for prediction in predictions:
        error = prediction - target
        squared = error.square().sum(-1)
        norm = safe_norm(error)
        loss = torch.where(norm <= delta, 0.5 * squared, delta * (norm - 0.5 * delta))
        total = total + loss.mean()
    return total


def _edge_tensor(
    edges: AdjacencyGraph | torch.Tensor | np.ndarray, device: torch.device
) -> torch.Tensor:
    if isinstance(edges, AdjacencyGraph):
        edges = edges.edge_index
    if isinstance(edges, np.ndarray):
        edges = torch.from_numpy(edges)
    return edges.to(device=device, dtype=torch.long)


def laplacian_loss(
    points: torch.Tensor | np.ndarray,
    edges: AdjacencyGraph | torch.Tensor | np.ndarray,
    *,
    scale_invariant: bool = True,
    skip_degenerate: bool = False,
    reduction: Reduction = "mean",
) -> torch.Tensor:
    """Edge-length normalized Laplacian smoothness loss.

    With ``e`` the summed length of all directed edges, every point
    contributes ``| sum_{y in A(x)} 2 (x - y) / (e |x - y|) |``. With
    `scale_invariant` the sum is multiplied by the mean edge length ``e / |E|``,
    which makes the loss invariant to uniform scaling.

    Parameters
    ----------
    points : torch.Tensor or numpy.ndarray
        Cloud (N, 3) or batch (B, N, 3).
    edges : AdjacencyGraph, torch.Tensor or numpy.ndarray
        Directed, symmetric edges (2, E). For a batch, indices address the
        flattened B*N points.
    scale_invariant : bool, optional
        Multiply by the mean edge length, by default True.
    skip_degenerate : bool, optional
        Drop zero-length edges instead of raising, by default False.

    Raises
    ------
    DegenerateInputError
        If two neighbors coincide, with the index of the offending point.
    """
    pts, unbatched = _batched(points)
    batch, n, _ = pts.shape
    if isinstance(edges, AdjacencyGraph) and edges.node_count != batch * n:
        msg = f"graph has {edges.node_count} nodes, cloud has {batch * n} points"
        raise SizeMismatchError(msg)
    source, target = _edge_tensor(edges, pts.device)
    flat = pts.reshape(batch * n, 3)
    diff = flat[source] - flat[target]
    length = safe_norm(diff)
    degenerate = length < DEGENERATE_EDGE
    if bool(degenerate.any()):
        if not skip_degenerate:
            node = int(source[degenerate][0]) % n
            msg = f"point {node} coincides with a neighbor"
            raise DegenerateInputError(msg, index=node)
        keep = ~degenerate
        source, diff, length = source[keep], diff[keep], length[keep]
    cloud = torch.div(source, n, rounding_mode="floor")
    total_length = torch.zeros(batch, dtype=pts.dtype, device=pts.device).index_add(
        0, cloud, length
    )
    edge_count = torch.zeros(batch, dtype=pts.dtype, device=pts.device).index_add(
        0, cloud, torch.ones_like(length)
    )
    term = 2.0 * diff / (total_length[cloud] * length).unsqueeze(-1)
    per_node = torch.zeros_like(flat).index_add(0, source, term)
    value = safe_norm(per_node).view(batch, n).sum(-1)
    if scale_invariant:
        value = value * total_length / edge_count.clamp_min(1.0)
    return _reduce(value, unbatched, reduction)


def orthogonality_penalty(matrices: torch.Tensor) -> torch.Tensor:
    """Mean ``|M M^T - I|_F^2`` over a batch of square matrices."""
    eye = torch.eye(matrices.shape[-1], dtype=matrices.dtype, device=matrices.device)
    gram = matrices @ matrices.transpose(-1, -2)
    return (gram - eye).square().sum((-1, -2)).mean()


def temporal_consistency_loss(
    previous: torch.Tensor, current: torch.Tensor
) -> torch.Tensor:
    """Chamfer distance between the refined outputs of consecutive frames."""
    return chamfer(previous, current)


def total_loss(
    weights: LossWeights,
    *,
    emd_align: float,
    huber: float,
    cd_coarse: float,
    cd_final: float,
    laplacian: float,
    orthogonality: float = 0.0,
    consistency: float = 0.0,
) -> LossReport:
    """Combine loss parts into a report whose total is the weighted sum.

    Examples
    --------
    >>> total_loss(LossWeights(alpha=1, beta=1, gamma=1), emd_align=1, huber=1,
    ...            cd_coarse=1, cd_final=1, laplacian=1).total
    5.0
    """
    report = LossReport(
        emd_align=float(emd_align),
        huber=float(huber),
        cd_coarse=float(cd_coarse),
        cd_final=float(cd_final),
        laplacian=float(laplacian),
        orthogonality=float(orthogonality),
        consistency=float(consistency),
    )
    report.total = report.recombine(weights)
    return report


def sequence_consistency(
    outputs: Sequence[torch.Tensor | np.ndarray],
    group: int = CONSISTENCY_GROUP,
) -> list[list[float]]:
    """Consistency indexes of a stream of completed clouds.

    The stream is cut into disjoint groups of `group` consecutive outputs; a
    trailing partial group is ignored. Each group yields the Chamfer distances
    between neighboring frames (x10^4).

    Raises
    ------
    SizeMismatchError
        If fewer than `group` outputs are given.
    """
    if group < 2 or len(outputs) < group:  # noqa: PLR2004
        msg = f"Need at least {group} outputs for consistency groups, got {len(outputs)}"
        raise SizeMismatchError(msg)
    result = []
    for start in range(0, len(outputs) - group + 1, group):
        frames = outputs[start : start + group]
        result.append(
            [per_point_cd(frames[i], frames[i + 1]) for i in range(group - 1)]
        )
    return result
