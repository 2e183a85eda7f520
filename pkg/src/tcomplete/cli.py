"""Command line interface."""

from __future__ import annotations

import argparse
import asyncio
from dataclasses import replace
import logging
from pathlib import Path
import sys
from typing import TYPE_CHECKING, NoReturn

import numpy as np
import orjson
import torch
from torch.utils.data import default_collate

from .const import __version__
from .dataset import SequenceDataset, generate_dataset, load_manifest, manifest_path
from .evaluate import EvalReport, evaluate, read_rows
from .exceptions import (
    ConfigError,
    OutputExistsError,
    PointFileError,
    SessionError,
    StorageError,
    TcompleteException,
)
from .helpers import derived_rng
from .pipeline import Checkpoint, TemporalCompletionNet
from .plots import write_plots
from .pointfile import SUFFIXES, read_points, write_pcb
from .temporal import TemporalState
from .trainer import train_stage, verify_gradients
from .types import EvalMode, PipelineConfig, ShapeFamily, Split, Stage

if TYPE_CHECKING:
    from collections.abc import Sequence

_LOGGER = logging.getLogger(__package__)

OUTPUT_KINDS = ("aligned", "coarse", "refined")


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with code 1."""

    def error(self, message: str) -> NoReturn:
        """Print usage and the message to stderr and exit with code 1."""
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _families(value: str) -> list[ShapeFamily]:
    try:
        return [ShapeFamily(name.strip()) for name in value.split(",") if name.strip()]
    except ValueError as e:
        msg = f"unknown shape family in {value!r}, choose from {', '.join(ShapeFamily)}"
        raise ConfigError(msg) from e


def _load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig().with_env_overrides()
    return PipelineConfig.from_file(path)


def cmd_gen_data(args: argparse.Namespace) -> int:
    """Generate a synthetic dataset."""
    config = _load_config(args.config)
    dataset = config.dataset
    if args.seed is not None:
        dataset = replace(dataset, seed=args.seed)
    if args.families is not None:
        dataset = replace(dataset, families=_families(args.families))
    if args.shapes is not None:
        dataset = replace(
            dataset, train_shapes=args.shapes, val_shapes=args.shapes, test_shapes=args.shapes
        )
    if args.frames is not None:
        dataset = replace(dataset, frames=args.frames)
    root = Path(args.out) if args.out else Path(dataset.root)
    paths = asyncio.run(generate_dataset(dataset, root=root, force=args.force))
    for path in paths.values():
        print(path)  # noqa: T201
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """Train one stage."""
    config = _load_config(args.config)
    if args.stage is not None:
        config = replace(config, train=replace(config.train, stage=Stage(args.stage)))
    if args.seed is not None:
        config = replace(config, train=replace(config.train, seed=args.seed))
    out = Path(args.ckpt_out)
    resuming = args.ckpt_in is not None and Path(args.ckpt_in).resolve() == out.resolve()
    if out.exists() and not (args.force or resuming):
        msg = f"{out} exists, use --force to overwrite"
        raise OutputExistsError(msg)
    root = Path(args.data) if args.data else Path(config.dataset.root)
    train_manifest = load_manifest(manifest_path(root, Split.TRAIN))
    val_path = manifest_path(root, Split.VAL)
    result = train_stage(
        config,
        train_manifest,
        checkpoint_in=args.ckpt_in,
        checkpoint_out=out,
        log_path=args.log,
        val_manifest=load_manifest(val_path) if val_path.exists() else None,
        max_steps=args.max_steps,
        progress=not args.quiet,
    )
    state = "finished" if result.finished else "stopped"
    print(f"{config.train.stage} {state}: {out}")  # noqa: T201
    return 0


def _fit_size(points: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    if points.shape[0] == size:
        return points
    if points.shape[0] > size:
        return points[np.sort(rng.choice(points.shape[0], size=size, replace=False))]
    extra = rng.choice(points.shape[0], size=size - points.shape[0], replace=True)
    return np.concatenate([points, points[extra]])


def _write_session(path: Path, state: TemporalState, points: int) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(state.to_bytes(points))
        tmp.replace(path)
    except OSError as e:
        raise SessionError(e.strerror or "cannot write session", path) from e


def complete_frames(
    net: TemporalCompletionNet,
    frame_files: Sequence[Path],
    out_dir: Path,
    *,
    session: Path | None = None,
    seed: int = 0,
    force: bool = False,
) -> list[Path]:
    """Complete a stream of frame files in order, one result per frame.

    Frames are numbered from 1 in the given order. With a session file the
    state is resumed from it and rewritten after every frame; frames up to
    its last frame are skipped.

    Returns
    -------
    list of Path
        Written files.
    """
    net.eval()
    num_points = net.encoder_config.num_points
    dtype = next(net.parameters()).dtype
    state = net.initial_state(1)
    if session is not None and session.exists():
        try:
            data = session.read_bytes()
        except OSError as e:
            raise SessionError(e.strerror or "cannot read session", session) from e
        try:
            state = TemporalState.from_bytes(data, dtype=dtype)
        except SessionError as e:
            raise SessionError(str(e), session) from e
        if state.hidden.shape != net.initial_state(1).hidden.shape:
            msg = "session does not match the checkpoint"
            raise SessionError(msg, session)
        _LOGGER.info("Resuming after frame %s", state.last_frame)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(e.strerror or "cannot create output directory", out_dir) from e
    written = []
    for index, path in enumerate(frame_files, start=1):
        if state.last_frame is not None and index <= state.last_frame:
            continue
        targets = [out_dir / f"frame_{index:04d}_{kind}.pcb" for kind in OUTPUT_KINDS]
        if not force and (existing := [t for t in targets if t.exists()]):
            msg = f"{existing[0]} exists, use --force to overwrite"
            raise OutputExistsError(msg)
        try:
            points = read_points(path)
            if points.shape[0] == 0:
                msg = "no points"
                raise PointFileError(msg, path)
        except PointFileError as e:
            _LOGGER.warning("Skipping frame %s: %s", index, e)
            continue
        cloud = _fit_size(points.astype(np.float64), num_points, derived_rng(seed, index))
        with torch.no_grad():
            step = net.step(torch.from_numpy(cloud).to(dtype).unsqueeze(0), state, index)
        state = step.state
        for target, result in zip(
            targets, (step.aligned, step.coarse, step.final), strict=True
        ):
            write_pcb(target, result[0].cpu().numpy())
        written.extend(targets)
        if session is not None:
            _write_session(session, state, num_points)
        _LOGGER.info("Completed frame %s (%s)", index, path.name)
    return written


def cmd_complete(args: argparse.Namespace) -> int:
    """Complete a stream of frames."""
    net = Checkpoint.load(args.ckpt).build_network()
    frames_dir = Path(args.frames_dir)
    if not frames_dir.is_dir():
        msg = "frames directory not found"
        raise PointFileError(msg, frames_dir)
    files = sorted(p for p in frames_dir.iterdir() if p.suffix in SUFFIXES)
    written = complete_frames(
        net,
        files,
        Path(args.out_dir),
        session=Path(args.session) if args.session else None,
        seed=args.seed,
        force=args.force,
    )
    print(f"{len(written) // len(OUTPUT_KINDS)} frames completed")  # noqa: T201
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluate a checkpoint on the test split."""
    config = _load_config(args.config)
    evaluation = config.evaluation
    if args.repeats is not None:
        evaluation = replace(evaluation, repeats=args.repeats)
    report_dir = Path(args.report)
    if (report_dir / "report.csv").exists() and not args.force:
        msg = f"{report_dir / 'report.csv'} exists, use --force to overwrite"
        raise OutputExistsError(msg)
    net = Checkpoint.load(args.ckpt).build_network()
    manifest = load_manifest(manifest_path(args.dataset, Split.TEST))
    report = evaluate(net, manifest, args.mode, evaluation)
    for baseline in args.baseline:
        report.merge(read_rows(baseline))
    report.save(report_dir, force=args.force)
    print(report_dir / "report.md")  # noqa: T201
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    """Render plots of a report."""
    report = EvalReport.load(args.report)
    paths = asyncio.run(
        write_plots(report, args.out, frames=args.frames, force=args.force)
    )
    if not paths:
        print("report is empty, nothing to plot")  # noqa: T201
    for path in paths:
        print(path)  # noqa: T201
    return 0


def cmd_verify_grads(args: argparse.Namespace) -> int:
    """Check analytic gradients against finite differences."""
    config = _load_config(args.config)
    if args.ckpt:
        net = Checkpoint.load(args.ckpt).build_network()
    else:
        torch.manual_seed(args.seed)
        net = TemporalCompletionNet.from_config(config)
    root = Path(args.data) if args.data else Path(config.dataset.root)
    dataset = SequenceDataset(load_manifest(manifest_path(root, Split.TRAIN)), seed=args.seed)
    if len(dataset) == 0:
        msg = "the training split is empty"
        raise ConfigError(msg)
    batch = default_collate([dataset[0]])
    report = verify_gradients(
        net,
        batch,
        weights=config.weights,
        checked_points=args.points,
        checked_parameters=args.parameters,
        seed=args.seed,
    )
    print(orjson.dumps(report.to_dict(), option=orjson.OPT_INDENT_2).decode())  # noqa: T201
    return 0


def build_parser() -> ArgumentParser:
    """Argument parser of the ``tcomplete`` command."""
    parser = ArgumentParser(
        prog="tcomplete",
        description="Temporally consistent point cloud completion.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    gen = commands.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--config", help="pipeline config file (JSON)")
    gen.add_argument("--seed", type=int, help="generator seed")
    gen.add_argument("--families", help="comma separated shape families")
    gen.add_argument("--shapes", type=int, help="shapes per family and split")
    gen.add_argument("--frames", type=int, help="frames per sequence")
    gen.add_argument("--out", help="dataset root directory")
    gen.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    gen.set_defaults(func=cmd_gen_data)

    train = commands.add_parser("train", help="train one stage")
    train.add_argument("--config", help="pipeline config file (JSON)")
    train.add_argument("--stage", choices=list(Stage), help="training stage")
    train.add_argument("--ckpt-in", help="checkpoint to start or resume from")
    train.add_argument("--ckpt-out", required=True, help="checkpoint to write")
    train.add_argument("--data", help="dataset root directory")
    train.add_argument("--log", help="append-only CSV metrics log")
    train.add_argument("--max-steps", type=int, help="stop after this many steps")
    train.add_argument("--seed", type=int, help="training seed")
    train.add_argument("--force", action="store_true", help="overwrite --ckpt-out")
    train.set_defaults(func=cmd_train)

    complete = commands.add_parser("complete", help="complete a stream of frames")
    complete.add_argument("--ckpt", required=True, help="trained checkpoint")
    complete.add_argument("--frames-dir", required=True, help="frames, in name order")
    complete.add_argument("--out-dir", required=True, help="output directory")
    complete.add_argument("--session", help="session file to resume from and update")
    complete.add_argument("--seed", type=int, default=0, help="resampling seed")
    complete.add_argument("--force", action="store_true", help="overwrite outputs")
    complete.set_defaults(func=cmd_complete)

    ev = commands.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True, help="trained checkpoint")
    ev.add_argument("--dataset", required=True, help="dataset root directory")
    ev.add_argument("--report", required=True, help="report directory")
    ev.add_argument("--mode", required=True, choices=list(EvalMode), help="protocol")
    ev.add_argument("--config", help="pipeline config file (JSON)")
    ev.add_argument("--repeats", type=int, help="disturbance repeats")
    ev.add_argument(
        "--baseline", action="append", default=[], help="baseline CSV to merge"
    )
    ev.add_argument("--force", action="store_true", help="overwrite the report")
    ev.set_defaults(func=cmd_eval)

    plot = commands.add_parser("plot", help="plot a report")
    plot.add_argument("--report", required=True, help="report directory")
    plot.add_argument("--out", required=True, help="image directory")
    plot.add_argument("--frames", type=int, nargs="+", help="frames to draw")
    plot.add_argument("--force", action="store_true", help="overwrite images")
    plot.set_defaults(func=cmd_plot)

    grads = commands.add_parser("verify-grads", help="finite-difference gradient check")
    grads.add_argument("--config", help="pipeline config file (JSON)")
    grads.add_argument("--ckpt", help="checkpoint (default: freshly initialized)")
    grads.add_argument("--data", help="dataset root directory")
    grads.add_argument("--points", type=int, default=4, help="input points checked")
    grads.add_argument("--parameters", type=int, default=8, help="parameters checked")
    grads.add_argument("--seed", type=int, default=0, help="sampling seed")
    grads.set_defaults(func=cmd_verify_grads)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run the command line interface and return the exit code."""
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TcompleteException as e:
        print(f"error: {e}", file=sys.stderr)  # noqa: T201
        return e.exit_code
