"""
Command-line entry point.

Subcommands:
    gen-data     render a synthetic train/val split to disk
    train        two-pass self-distillation training
    eval         APReport of one depth configuration
    sweep        every depth configuration, Pareto front, CSV and plot
    cka          boundary CKA per stage (optionally against a naive twin)
    report       paired super/base AP and AR breakdown
    plot-pareto  redraw the Pareto plot from a sweep CSV

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

import pandas as pd

from . import __version__
from .analysis import cka_report, depth_sweep, plot_pareto, pr_breakdown
from .config import BACKBONE, NECK, ArchSpec, DepthConfiguration, HeadKind, enumerate_configs, parse_depth_config
from .data import DatasetSpec, Scene, generate_dataset, load_dataset, save_dataset, tier_counts
from .errors import DepthdialError, InvalidSpecError
from .losses import KDHyper
from .settings import RunSettings, Schedule, output_root
from .trainer import (
    LAST_CHECKPOINT,
    METRICS_FILE,
    TrainState,
    atomic_write,
    collect_predictions,
    create_train_state,
    evaluate_model,
    load_checkpoint,
    read_checkpoint_meta,
    save_checkpoint,
    set_determinism,
    train,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

HEAD_FLAGS = {"detr": HeadKind.SET_PREDICTION, "dense": HeadKind.DENSE}
TRAIN_SPLIT = "train"
VAL_SPLIT = "val"
VAL_SEED_OFFSET = 1_000_003
SETTINGS_FILE = "settings.json"
SWEEP_FILE = "sweep.csv"
PARETO_PLOT = "pareto.png"
CKA_FILE = "cka.csv"
CKA_NAIVE_FILE = "cka_naive.csv"
REPORT_FILE = "pr_breakdown.csv"
EVAL_FILE = "eval.csv"


class _ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    """What a command ran on and what it wrote."""

    command: str
    config_hash: str | None
    seed: int | None
    argv: list[str]
    artifacts: list[str] = field(default_factory=list)
    started_at: str = ""
    wall_clock_s: float = 0.0
    git_revision: str | None = None
    version: str = __version__

    def add(self, path: str | Path) -> Path:
        path = Path(path)
        self.artifacts.append(str(path))
        return path

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"{self.command}.manifest.json"
        self.artifacts.append(str(path))
        atomic_write(path, json.dumps(asdict(self), indent=2).encode())
        return path


def git_revision() -> str | None:
    try:
        result = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, check=True, timeout=5
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return result.stdout.strip() or None


class _Run:
    """Per-invocation context: output dir, manifest and the work-started flag."""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args = args
        self.out = output_root(args.out)
        self.started = False
        self.clock = time.perf_counter()
        self.manifest = RunManifest(
            command=args.command,
            config_hash=None,
            seed=getattr(args, "seed", None),
            argv=list(argv),
            started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        )

    def begin(self, config_hash: str | None = None, seed: int | None = None) -> None:
        """Inputs are resolved; errors from here on are runtime failures."""
        self.started = True
        if config_hash is not None:
            self.manifest.config_hash = config_hash
        if seed is not None:
            self.manifest.seed = seed
        self.out.mkdir(parents=True, exist_ok=True)

    def finish(self) -> Path:
        self.manifest.wall_clock_s = round(time.perf_counter() - self.clock, 3)
        self.manifest.git_revision = git_revision()
        return self.manifest.write(self.out)


# ---------------------------------------------------------------------------
# Input resolution
# ---------------------------------------------------------------------------


def _read_json(path: str, what: str) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise InvalidSpecError(f"{what} file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise InvalidSpecError(f"{what} file {path} is not valid JSON ({e})") from e


def resolve_settings(args: argparse.Namespace) -> RunSettings:
    """Run settings from --settings/--arch/--head/--hyper/--steps/--naive."""
    if args.settings:
        settings = RunSettings.load(args.settings)
    else:
        settings = RunSettings.for_head(HEAD_FLAGS[args.head])
    if args.arch:
        arch = ArchSpec.from_dict(_read_json(args.arch, "arch"))
        hyper = settings.hyper if args.settings else KDHyper.for_head(arch.head_kind)
        settings = RunSettings(arch, hyper, settings.schedule)
    if args.hyper:
        overrides = _read_json(args.hyper, "hyper")
        settings = settings.with_hyper(KDHyper.from_dict({**settings.hyper.to_dict(), **overrides}))
    if args.naive:
        settings = RunSettings(settings.arch.without_switchable(), settings.hyper.naive_joint(), settings.schedule)
    if args.steps is not None:
        if args.steps < 0:
            raise InvalidSpecError(f"--steps must be non-negative, got {args.steps}")
        settings = RunSettings(settings.arch, settings.hyper, replace(settings.schedule, steps=args.steps))
    return settings


def _dataset_spec(schedule: Schedule) -> DatasetSpec:
    return DatasetSpec(hw=(schedule.image_size, schedule.image_size), clutter=schedule.clutter)


def _split_dir(root: Path, split: str) -> Path:
    sub = root / split
    return sub if sub.is_dir() else root


def training_data(data_dir: str | None, schedule: Schedule, seed: int) -> tuple[list[Scene], list[Scene]]:
    """(train, val) scenes from ``data_dir`` or generated from the schedule."""
    if data_dir:
        root = Path(data_dir)
        return load_dataset(_split_dir(root, TRAIN_SPLIT)), load_dataset(_split_dir(root, VAL_SPLIT))
    spec = _dataset_spec(schedule)
    return (
        generate_dataset(seed, schedule.train_images, spec),
        generate_dataset(seed + VAL_SEED_OFFSET, schedule.val_images, spec),
    )


def evaluation_data(data_dir: str | None, state: TrainState) -> list[Scene]:
    if data_dir:
        return load_dataset(_split_dir(Path(data_dir), VAL_SPLIT))
    return generate_dataset(state.seed + VAL_SEED_OFFSET, state.schedule.val_images, _dataset_spec(state.schedule))


def _settings_of(state: TrainState) -> RunSettings:
    return RunSettings(state.arch, state.hyper, state.schedule)


def _write_frame(run: _Run, frame: pd.DataFrame, name: str) -> Path:
    path = run.manifest.add(run.out / name)
    frame.to_csv(path, index=False, float_format="%.6f")
    return path


def _load_for_eval(run: _Run, path: str) -> TrainState:
    state = load_checkpoint(path)
    set_determinism(state.seed)
    run.manifest.config_hash = _settings_of(state).config_hash()
    run.manifest.seed = state.seed
    return state


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(run: _Run) -> int:
    args = run.args
    spec = DatasetSpec(hw=(args.size, args.size), clutter=args.clutter)
    run.begin(seed=args.seed)
    splits = ((TRAIN_SPLIT, args.train_images, args.seed), (VAL_SPLIT, args.val_images, args.seed + VAL_SEED_OFFSET))
    for split, n, seed in splits:
        scenes = generate_dataset(seed, n, spec)
        run.manifest.add(save_dataset(scenes, run.out / split))
        logger.info("%s: %d scenes, objects per tier %s", split, len(scenes), tier_counts(scenes))
    return EXIT_OK


def cmd_train(run: _Run) -> int:
    args = run.args
    settings = resolve_settings(args)
    run.begin(settings.config_hash(), args.seed)
    set_determinism(args.seed)
    run.manifest.add(settings.save(run.out / SETTINGS_FILE))
    train_scenes, val_scenes = training_data(args.data, settings.schedule, args.seed)
    state = create_train_state(settings.arch, settings.hyper, settings.schedule, args.seed)
    state = train(state, train_scenes, settings.schedule, val_scenes, run.out)
    last = run.out / LAST_CHECKPOINT
    if not last.exists():
        save_checkpoint(state, last)
    for path in sorted(run.out.glob("*.pt")) + sorted(run.out.glob("*.pt.json")) + [run.out / METRICS_FILE]:
        if path.exists():
            run.manifest.add(path)
    print(f"trained {state.step} steps; checkpoint {last}")
    return EXIT_OK


def cmd_eval(run: _Run) -> int:
    args = run.args
    meta_arch = _checkpoint_arch(args.checkpoint)
    config = parse_depth_config(args.config, meta_arch, args.exit)
    run.begin()
    state = _load_for_eval(run, args.checkpoint)
    report = evaluate_model(state.model, evaluation_data(args.data, state), config, args.batch_size)
    frame = pd.DataFrame([{"config": config.label(state.arch), **report.to_dict()}])
    _write_frame(run, frame, EVAL_FILE)
    print(f"{config.label(state.arch)}: {report.summary()}")
    return EXIT_OK


def cmd_sweep(run: _Run) -> int:
    args = run.args
    arch = _checkpoint_arch(args.checkpoint)
    configs = enumerate_configs(arch, args.exits)
    run.begin()
    state = _load_for_eval(run, args.checkpoint)
    result = depth_sweep(state.model, evaluation_data(args.data, state), configs, args.metric, args.batch_size)
    _write_frame(run, result.to_frame(), SWEEP_FILE)
    run.manifest.add(plot_pareto(result, run.out / PARETO_PLOT))
    for row in result.front:
        print(f"{row.config.label(arch)}\t{row.flops}\t{getattr(row.report, args.metric):.4f}")
    return EXIT_OK


def cmd_cka(run: _Run) -> int:
    args = run.args
    run.begin()
    state = _load_for_eval(run, args.checkpoint)
    data = evaluation_data(args.data, state)
    kwargs = dict(bootstrap_n=args.bootstrap, max_samples=args.max_samples, batches=args.batches, seed=state.seed)
    report = cka_report(state.model, data, **kwargs)
    _write_frame(run, report.to_frame(), CKA_FILE)
    print(report.to_frame().to_string(index=False))
    groups = (BACKBONE, NECK)
    print("method  " + "  ".join(f"{g}={report.group_mean(state.arch, g):.4f}" for g in groups))
    if args.compare_naive:
        naive = load_checkpoint(args.compare_naive)
        naive_report = cka_report(naive.model, data, **kwargs)
        _write_frame(run, naive_report.to_frame(), CKA_NAIVE_FILE)
        print("naive   " + "  ".join(f"{g}={naive_report.group_mean(naive.arch, g):.4f}" for g in groups))
    return EXIT_OK


def cmd_report(run: _Run) -> int:
    args = run.args
    arch = _checkpoint_arch(args.checkpoint)
    base = DepthConfiguration.base_net(arch, args.exit)
    run.begin()
    state = _load_for_eval(run, args.checkpoint)
    data = evaluation_data(args.data, state)
    pred_super, gt = collect_predictions(state.model, data, DepthConfiguration.super_net(arch), args.batch_size)
    pred_base, _ = collect_predictions(state.model, data, base, args.batch_size)
    breakdown = pr_breakdown(pred_super, pred_base, gt, num_classes=arch.num_classes)
    frame = breakdown.to_frame()
    _write_frame(run, frame, REPORT_FILE)
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_plot_pareto(run: _Run) -> int:
    args = run.args
    csv = Path(args.csv)
    if not csv.is_file():
        raise InvalidSpecError(f"sweep CSV not found: {csv}")
    run.begin()
    frame = pd.read_csv(csv)
    if args.metric not in frame.columns:
        raise InvalidSpecError(f"column '{args.metric}' not in {csv}")
    path = run.manifest.add(plot_pareto(frame, args.plot or run.out / PARETO_PLOT, args.metric))
    print(path)
    return EXIT_OK


def _checkpoint_arch(path: str) -> ArchSpec:
    return ArchSpec.from_dict(read_checkpoint_meta(path)["arch"])


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _exit_arg(value: str) -> int:
    exit_ = int(value)
    if exit_ < 1:
        raise argparse.ArgumentTypeError(f"decoder exit must be >= 1, got {value}")
    return exit_


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="depthdial", description="Any-depth object detection toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    def command(name: str, handler: Callable[[_Run], int], help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--out", help="output directory (default: $DEPTHDIAL_OUT or ./runs)")
        p.set_defaults(handler=handler)
        return p

    def evaluation(p: argparse.ArgumentParser) -> None:
        p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
        p.add_argument("--data", help="dataset directory from 'gen-data' (val split); default regenerates it")
        p.add_argument("--batch-size", type=int, default=16, help="evaluation batch size")

    p = command("gen-data", cmd_gen_data, "render a synthetic shapes dataset")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--train-images", type=int, default=512, help="training scenes")
    p.add_argument("--val-images", type=int, default=128, help="validation scenes")
    p.add_argument("--size", type=int, default=128, help="image side in pixels")
    p.add_argument("--clutter", type=float, default=0.5, help="clutter level in [0, 1]")

    p = command("train", cmd_train, "train super-net and base-net with self-distillation")
    p.add_argument("--settings", help="run settings JSON (arch, hyper, schedule)")
    p.add_argument("--arch", help="architecture JSON overriding the preset")
    p.add_argument("--head", choices=sorted(HEAD_FLAGS), default="detr", help="preset head kind")
    p.add_argument("--hyper", help="JSON with distillation hyperparameter overrides")
    p.add_argument("--naive", action="store_true", help="naive joint training: no KD, no switchable components")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--steps", type=int, help="override the schedule's step count")
    p.add_argument("--data", help="dataset directory from 'gen-data'; default generates one")

    p = command("eval", cmd_eval, "evaluate one depth configuration")
    evaluation(p)
    p.add_argument(
        "--config", default="full:all", help="depth config: 'essential:P2,P3', 'full:all' or a bitstring like 00111111"
    )
    p.add_argument("--exit", type=_exit_arg, help="decoder exit layer (set-prediction heads)")

    p = command("sweep", cmd_sweep, "evaluate every depth configuration and mark the Pareto front")
    evaluation(p)
    p.add_argument("--exits", type=_exit_arg, nargs="+", help="decoder exits to sweep (default: all)")
    p.add_argument("--metric", default="ap50", help="APReport field ranked on the front")

    p = command("cka", cmd_cka, "linear CKA between essential and full boundary features")
    evaluation(p)
    p.add_argument("--compare-naive", metavar="CHECKPOINT", help="naive joint-train checkpoint to compare against")
    p.add_argument("--bootstrap", type=int, default=500, help="bootstrap resamples")
    p.add_argument("--max-samples", type=int, default=20_000, help="pooled rows per stage")
    p.add_argument("--batches", type=int, default=500, help="maximum batches consumed")

    p = command("report", cmd_report, "paired super-net / base-net AP and AR breakdown")
    evaluation(p)
    p.add_argument("--exit", type=_exit_arg, help="base-net decoder exit (set-prediction heads)")

    p = command("plot-pareto", cmd_plot_pareto, "plot accuracy against FLOPs from a sweep CSV")
    p.add_argument("--csv", required=True, help="CSV written by 'sweep'")
    p.add_argument("--plot", help="output image path (default: <out>/pareto.png)")
    p.add_argument("--metric", default="ap50", help="accuracy column")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    run = _Run(args, argv)
    try:
        code = args.handler(run)
    except ValueError as e:
        if run.started:
            logger.error("%s failed: %s", args.command, e)
            return EXIT_RUNTIME
        parser.print_usage(sys.stderr)
        print(f"depthdial {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DepthdialError, RuntimeError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_RUNTIME
    run.finish()
    return code


if __name__ == "__main__":
    sys.exit(main())
