"""Staged training, the metrics log and finite-difference gradient checks."""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import TYPE_CHECKING, Any

import torch
from torch.optim import Adam
from torch.optim.lr_scheduler import CosineAnnealingLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from .dataset import SequenceDataset
from .exceptions import OrderingError, StorageError
from .geometry import gather_points
from .helpers import derived_rng, mean, seed_everything
from .losses import (
    EmdMethod,
    alignment_loss,
    chamfer,
    huber_translation,
    laplacian_loss,
    orthogonality_penalty,
    per_point_cd,
    temporal_consistency_loss,
    total_loss,
)
from .pipeline import Checkpoint, TemporalCompletionNet
from .temporal import window_push
from .types import (
    DatasetManifest,
    GradientReport,
    LossReport,
    LossWeights,
    PipelineConfig,
    Stage,
    TrainProgress,
)

if TYPE_CHECKING:
    from collections.abc import Callable

    from .align_complete import Stage1Output

_LOGGER = logging.getLogger(__package__)

LOG_COLUMNS = (
    "step",
    "epoch",
    "stage",
    "emd_align",
    "huber",
    "cd_coarse",
    "cd_final",
    "laplacian",
    "orthogonality",
    "consistency",
    "total",
    "lr",
    "val_cd",
)

type Batch = dict[str, torch.Tensor]


@dataclass(kw_only=True)
class LossParts:
    """Differentiable loss parts of one batch; unset parts are zero."""

    emd_align: torch.Tensor | float = 0.0
    huber: torch.Tensor | float = 0.0
    cd_coarse: torch.Tensor | float = 0.0
    cd_final: torch.Tensor | float = 0.0
    laplacian: torch.Tensor | float = 0.0
    orthogonality: torch.Tensor | float = 0.0
    consistency: torch.Tensor | float = 0.0

    def add(self, other: LossParts) -> LossParts:
        """Part-wise sum."""
        return LossParts(
            **{k: getattr(self, k) + getattr(other, k) for k in self.__dataclass_fields__}
        )

    def total(self, weights: LossWeights) -> torch.Tensor:
        """Weighted objective."""
        value = weights.combine(**self.as_kwargs())
        return value if isinstance(value, torch.Tensor) else torch.tensor(value)

    def as_kwargs(self) -> dict[str, Any]:
        """Parts as keyword arguments."""
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def report(self, weights: LossWeights) -> LossReport:
        """Detached report whose total recombines the logged parts."""
        return total_loss(weights, **{k: float(v) for k, v in self.as_kwargs().items()})


def _stage1_parts(
    out: Stage1Output,
    batch: Batch,
    frame: int,
    weights: LossWeights,
    emd_method: EmdMethod,
) -> LossParts:
    assert out.coarse is not None  # noqa: S101
    dtype = out.coarse.dtype
    gt_full = batch["gt_aligned"][:, frame].to(dtype)
    gt_partials = [gather_points(gt_full, idx) for idx in out.sample_indices]
    return LossParts(
        emd_align=alignment_loss(out.aligned, gt_partials, weights, method=emd_method),
        huber=huber_translation(
            out.translations, batch["translation"][:, frame].to(dtype), weights.huber_delta
        ),
        cd_coarse=chamfer(out.coarse, batch["complete"].to(dtype)),
        orthogonality=sum(
            (orthogonality_penalty(m) for m in out.feature_transforms),
            start=torch.zeros((), dtype=dtype, device=out.coarse.device),
        ),
    )


def compute_losses(
    net: TemporalCompletionNet,
    batch: Batch,
    stage: Stage,
    weights: LossWeights,
    *,
    emd_method: EmdMethod = "auto",
) -> tuple[torch.Tensor, LossReport]:
    """Objective of one batch for a training stage.

    ``align`` scores the first frame's alignment, translation, coarse
    completion and feature-transform orthogonality. ``refine`` runs the first
    stage without gradient and scores the refined cloud with Chamfer and
    Laplacian terms. ``temporal`` unrolls all frames of the sample through the
    memory and window, sums every term over the frames and adds the Chamfer
    distance between consecutive refined outputs.

    Returns
    -------
    tuple
        The differentiable total and its detached report.
    """
    points = batch["points"]
    complete = batch["complete"]
    match stage:
        case Stage.ALIGN:
            out, _ = net.stage1.stage1_forward(points[:, 0])
            parts = _stage1_parts(out, batch, 0, weights, emd_method)
        case Stage.REFINE:
            with torch.no_grad():
                out, _ = net.stage1.stage1_forward(points[:, 0])
            state = window_push(
                net.initial_state(points.shape[0]), out.aligned[0], 0
            )
            refined, refine_input = net.stage2.stage2_forward(out, state)
            parts = LossParts(
                cd_final=chamfer(refined, complete.to(refined.dtype)),
                laplacian=laplacian_loss(
                    refined, refine_input.edge_index, skip_degenerate=True
                ),
            )
        case Stage.TEMPORAL:
            state = net.initial_state(points.shape[0])
            parts = LossParts()
            previous = None
            for frame in range(points.shape[1]):
                step = net.step(points[:, frame], state, frame)
                state = step.state
                assert step.refined is not None  # noqa: S101
                assert step.refine_input is not None  # noqa: S101
                frame_parts = _stage1_parts(step.stage1, batch, frame, weights, emd_method)
                frame_parts.cd_final = chamfer(step.refined, complete.to(step.refined.dtype))
                frame_parts.laplacian = laplacian_loss(
                    step.refined, step.refine_input.edge_index, skip_degenerate=True
                )
                if previous is not None:
                    frame_parts.consistency = temporal_consistency_loss(
                        previous, step.refined
                    )
                parts = parts.add(frame_parts)
                previous = step.refined
    return parts.total(weights), parts.report(weights)


def _append_rows(path: Path, rows: list[dict[str, Any]]) -> None:
    new = not path.exists() or path.stat().st_size == 0
    try:
        with path.open("a", newline="", encoding="utf-8") as fp:
            writer = csv.DictWriter(fp, fieldnames=LOG_COLUMNS)
            if new:
                writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        raise StorageError(e.strerror or "cannot write metrics log", path) from e


def read_metrics_log(path: Path | str) -> list[dict[str, str]]:
    """Rows of a metrics log."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fp:
            return list(csv.DictReader(fp))
    except OSError as e:
        raise StorageError(e.strerror or "cannot read metrics log", path) from e


def validation_cd(
    net: TemporalCompletionNet,
    manifest: DatasetManifest,
    *,
    seed: int = 0,
    batch_size: int = 8,
) -> float:
    """Mean per-point Chamfer distance (x10^4) of single-frame completions."""
    dataset = SequenceDataset(manifest, frames_per_sample=1, seed=seed)
    values = []
    net.eval()
    with torch.no_grad():
        for batch in DataLoader(dataset, batch_size=batch_size):
            points = batch["points"][:, 0]
            step = net.step(points, net.initial_state(points.shape[0]), 0)
            values.extend(
                per_point_cd(final, gt)
                for final, gt in zip(step.final, batch["complete"], strict=True)
            )
    return mean(values)


@dataclass(kw_only=True)
class StageResult:
    """Outcome of :func:`train_stage`."""

    checkpoint: Checkpoint
    reports: list[LossReport] = field(default_factory=list)
    finished: bool = True


def train_stage(
    config: PipelineConfig,
    manifest: DatasetManifest,
    *,
    checkpoint_in: Path | str | None = None,
    checkpoint_out: Path | str,
    log_path: Path | str | None = None,
    val_manifest: DatasetManifest | None = None,
    max_steps: int | None = None,
    progress: bool = False,
) -> StageResult:
    """Run (or resume) one training stage.

    Parameters
    ----------
    config : PipelineConfig
        Network layout (used only without `checkpoint_in`), schedule and loss
        weights.
    manifest : DatasetManifest
        Training split.
    checkpoint_in : Path or str, optional
        Checkpoint to start from. A checkpoint that stopped inside the same
        stage is resumed at its next batch.
    checkpoint_out : Path or str
        Where the result (and periodic snapshots) are written.
    log_path : Path or str, optional
        Append-only CSV metrics log.
    val_manifest : DatasetManifest, optional
        Validation split, scored at the end of every epoch.
    max_steps : int, optional
        Stop after this many optimizer steps in total; the checkpoint then
        records the position for resuming.
    progress : bool, optional
        Show a progress bar, by default False.

    Raises
    ------
    OrderingError
        If a prerequisite stage has not been completed.
    """
    train = config.train
    stage = train.stage
    seed_everything(train.seed)
    resume_from = None
    if checkpoint_in is not None:
        source = Checkpoint.load(checkpoint_in)
        net = source.build_network()
        completed = list(source.header.completed_stages)
        if source.header.progress is not None and source.header.progress.stage is stage:
            resume_from = source
    else:
        net = TemporalCompletionNet.from_config(config)
        completed = []
    if missing := [s for s in stage.prerequisites if s not in completed]:
        msg = f"stage {stage} needs completed stages: {', '.join(missing)}"
        raise OrderingError(msg)

    net.freeze_for(stage)
    optimizer = Adam(
        net.parameter_groups(stage, train.learning_rate, train.non_temporal_lr_scale),
        betas=train.adam_betas,
        weight_decay=train.weight_decay,
    )
    dataset = SequenceDataset(
        manifest,
        frames_per_sample=train.sample_frames,
        limits=config.dataset.limits,
        seed=train.seed,
    )
    steps_per_epoch = math.ceil(len(dataset) / train.batch_size)
    scheduler = CosineAnnealingLR(
        optimizer,
        T_max=max(1, train.epochs * steps_per_epoch),
        eta_min=train.min_learning_rate,
    )
    global_step = 0
    if resume_from is not None and resume_from.header.progress is not None:
        if resume_from.optimizer is not None:
            optimizer.load_state_dict(resume_from.optimizer)
        if resume_from.scheduler is not None:
            scheduler.load_state_dict(resume_from.scheduler)
        global_step = resume_from.header.progress.global_step
        _LOGGER.info("Resuming stage %s at step %s", stage, global_step)

    def snapshot(*, done: bool) -> Checkpoint:
        return Checkpoint.from_network(
            net,
            completed_stages=[*completed, stage] if done and stage not in completed else completed,
            progress=None
            if done
            else TrainProgress(
                stage=stage,
                epoch=global_step // max(steps_per_epoch, 1),
                global_step=global_step,
                steps_per_epoch=steps_per_epoch,
            ),
            optimizer=None if done else optimizer.state_dict(),
            scheduler=None if done else scheduler.state_dict(),
        )

    log_file = Path(log_path) if log_path is not None else None
    reports: list[LossReport] = []
    _LOGGER.info(
        "Training stage %s: %s epochs of %s steps", stage, train.epochs, steps_per_epoch
    )
    start_epoch = global_step // steps_per_epoch if steps_per_epoch else 0
    for epoch in range(start_epoch, train.epochs):
        dataset.set_epoch(epoch)
        order = derived_rng(train.seed, epoch).permutation(len(dataset)).tolist()
        skip = global_step - epoch * steps_per_epoch
        loader = DataLoader(
            dataset,
            batch_size=train.batch_size,
            sampler=order[skip * train.batch_size :],
            num_workers=train.num_workers,
        )
        rows = []
        for batch_index, batch in enumerate(
            tqdm(loader, desc=f"{stage} {epoch + 1}/{train.epochs}", disable=not progress),
            start=skip,
        ):
            net.train()
            optimizer.zero_grad()
            loss, report = compute_losses(net, batch, stage, config.weights)
            loss.backward()
            optimizer.step()
            lr = optimizer.param_groups[0]["lr"]
            scheduler.step()
            global_step += 1
            reports.append(report)
            _LOGGER.debug("step %s: %s", global_step, report)
            row = {
                "step": global_step,
                "epoch": epoch,
                "stage": str(stage),
                **{k: repr(v) for k, v in report.to_dict().items()},
                "lr": repr(lr),
                "val_cd": "",
            }
            if batch_index == steps_per_epoch - 1 and val_manifest is not None:
                row["val_cd"] = repr(
                    validation_cd(net, val_manifest, seed=train.seed)
                )
            rows.append(row)
            stop = max_steps is not None and global_step >= max_steps
            if stop or (train.checkpoint_every and global_step % train.checkpoint_every == 0):
                if log_file is not None:
                    _append_rows(log_file, rows)
                    rows = []
                latest = snapshot(done=False)
                latest.save(checkpoint_out)
            if stop:
                _LOGGER.info("Stopped stage %s at step %s", stage, global_step)
                return StageResult(
                    checkpoint=latest,
                    reports=reports,
                    finished=False,
                )
        if log_file is not None and rows:
            _append_rows(log_file, rows)
        if reports:
            _LOGGER.info(
                "Epoch %s done, mean loss %.6f",
                epoch,
                mean(r.total for r in reports[-steps_per_epoch:]),
            )
    result = snapshot(done=True)
    result.save(checkpoint_out)
    return StageResult(checkpoint=result, reports=reports)


def _numeric_gradients(
    evaluate: Callable[[], dict[str, torch.Tensor]],
    perturb: Callable[[float], None],
    step: float,
) -> dict[str, float]:
    perturb(step)
    plus = {k: float(v) for k, v in evaluate().items()}
    perturb(-2.0 * step)
    minus = {k: float(v) for k, v in evaluate().items()}
    perturb(step)
    return {k: (plus[k] - minus[k]) / (2.0 * step) for k in plus}


def gradient_terms(
    net: TemporalCompletionNet,
    points: torch.Tensor,
    batch: Batch,
    weights: LossWeights,
) -> dict[str, torch.Tensor]:
    """Every loss term of a single frame, computed with the exact EMD solver."""
    out, _ = net.stage1.stage1_forward(points)
    assert out.coarse is not None  # noqa: S101
    dtype = points.dtype
    gt_full = batch["gt_aligned"][:, 0].to(dtype)
    gt_partials = [gather_points(gt_full, idx) for idx in out.sample_indices]
    state = net.initial_state(points.shape[0])
    fused, _ = net.memory.gru_update(out.shape_code, state)
    refined, refine_input = net.stage2.stage2_forward(
        out, window_push(state, out.aligned[0], 0)
    )
    complete = batch["complete"].to(dtype)
    return {
        "emd_align": alignment_loss(out.aligned, gt_partials, weights, method="exact"),
        "huber": huber_translation(
            out.translations, batch["translation"][:, 0].to(dtype), weights.huber_delta
        ),
        "cd_coarse": chamfer(out.coarse, complete),
        "cd_final": chamfer(refined, complete),
        "laplacian": laplacian_loss(refined, refine_input.edge_index, skip_degenerate=True),
        "orthogonality": sum(
            (orthogonality_penalty(m) for m in out.feature_transforms),
            start=torch.zeros((), dtype=dtype),
        ),
        "gru": fused.square().sum(),
    }


def verify_gradients(
    net: TemporalCompletionNet,
    batch: Batch,
    *,
    weights: LossWeights | None = None,
    checked_points: int = 4,
    checked_parameters: int = 8,
    step: float = 1e-5,
    seed: int = 0,
) -> GradientReport:
    """Compare analytic gradients of every loss term with central differences.

    The network and the first frame of `batch` are converted to float64.
    Checked are all coordinates of `checked_points` random input points and
    `checked_parameters` random parameter entries. The relative error of a
    term is ``|a - n|_inf / max(|n|_inf, |a|_inf, 1e-12)``.
    """
    weights = weights or LossWeights()
    net = copy.deepcopy(net).double()
    net.eval()
    rng = derived_rng(seed)
    points = batch["points"][:, 0].double().clone().requires_grad_(True)
    params = [p for p in net.parameters()]
    for p in params:
        p.requires_grad_(True)
    point_ids = rng.choice(points.shape[1], size=min(checked_points, points.shape[1]), replace=False)
    param_ids = [
        (int(i), int(rng.integers(params[int(i)].numel())))
        for i in rng.integers(len(params), size=checked_parameters)
    ]

    terms = gradient_terms(net, points, batch, weights)
    analytic: dict[str, list[float]] = {}
    for name, value in terms.items():
        grads = torch.autograd.grad(
            value, [points, *params], allow_unused=True, retain_graph=True
        )
        point_grad = grads[0] if grads[0] is not None else torch.zeros_like(points)
        values = [float(point_grad[0, i, c]) for i in point_ids for c in range(3)]
        for pi, flat in param_ids:
            grad = grads[1 + pi]
            values.append(0.0 if grad is None else float(grad.reshape(-1)[flat]))
        analytic[name] = values

    numeric: dict[str, list[float]] = {name: [] for name in terms}

    def evaluate() -> dict[str, torch.Tensor]:
        with torch.no_grad():
            return gradient_terms(net, points, batch, weights)

    for i in point_ids:
        for c in range(3):

            def move(h: float, i: int = int(i), c: int = c) -> None:
                with torch.no_grad():
                    points[0, i, c] += h

            for name, value in _numeric_gradients(evaluate, move, step).items():
                numeric[name].append(value)
    for pi, flat in param_ids:

        def move_param(h: float, pi: int = pi, flat: int = flat) -> None:
            with torch.no_grad():
                params[pi].view(-1)[flat] += h

        for name, value in _numeric_gradients(evaluate, move_param, step).items():
            numeric[name].append(value)

    errors, largest = {}, {}
    for name in terms:
        a = torch.tensor(analytic[name], dtype=torch.float64)
        n = torch.tensor(numeric[name], dtype=torch.float64)
        scale = max(float(n.abs().max()), float(a.abs().max()), 1e-12)
        errors[name] = float((a - n).abs().max()) / scale
        largest[name] = float(a.abs().max())
    return GradientReport(
        step=step,
        checked_points=len(point_ids),
        checked_parameters=len(param_ids),
        relative_errors=errors,
        max_abs_gradient=largest,
    )
