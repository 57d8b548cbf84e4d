"""Command-line entry point: synthetic data, training, evaluation, sweeps and checks."""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv

import diffcore
from config import ConfigError, RuntimeConfig, dump_experiment_config, load_experiment_config, resolve_axis
from data import build_dataset, default_preprocess_config, synth_dataset, write_synthetic_dataset
from evaluation import evaluate
from gradcheck import SUITES, run_suite
from harness import PRESETS, SweepSpec, get_preset, render_table, run_sweep
from models import SamplerConfig, SamplingStrategy
from networks import ArchitectureFactory, load_model
from sampling import plan_frames
from train import train
from utils import setup_logging

logger = logging.getLogger(__name__)

# Values of a multi-key sweep axis are joined with this separator, e.g. "1:10".
AXIS_VALUE_SEPARATOR = ":"


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value experiment file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--no-regime", dest="regime", action="store_false",
                        help="skip the variant's optimizer and decoder defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aqa-transformer", description="Video action quality assessment at desk scale")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth-data", help="write a synthetic dataset with a manifest")
    synth.add_argument("--out", required=True)
    synth.add_argument("--n-clips", type=int, default=640)
    synth.add_argument("--frames", type=int, default=64)
    synth.add_argument("--height", type=int, default=32)
    synth.add_argument("--width", type=int, default=32)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--test-fraction", type=float, default=0.2)

    train_cmd = commands.add_parser("train", help="train one model")
    _add_config_args(train_cmd)
    train_cmd.add_argument("--out", help="directory for checkpoints and the training log")
    train_cmd.add_argument("--resume", help="training session directory to continue from")

    eval_cmd = commands.add_parser("eval", help="evaluate a saved model on the test split")
    eval_cmd.add_argument("--model", required=True, help="directory holding model.ckpt and model.json")
    _add_config_args(eval_cmd)

    sweep = commands.add_parser("sweep", help="train one model per axis value")
    sweep.add_argument("--preset", choices=sorted(PRESETS))
    _add_config_args(sweep)
    sweep.add_argument("--axis", nargs="+", help="config keys varied together (with --config/--set)")
    sweep.add_argument("--values", nargs="+",
                       help=f"one entry per row; keys of a multi-key axis separated by '{AXIS_VALUE_SEPARATOR}'")
    sweep.add_argument("--epochs", type=int, help="override train.epochs for every row")
    sweep.add_argument("--out", help="directory for results.csv, table.txt and row logs")
    sweep.add_argument("--workers", type=int, help="rows trained concurrently")

    check = commands.add_parser("grad-check", help="finite-difference gradient checks")
    check.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    check.add_argument("--tol", type=float)
    check.add_argument("--coords", type=int, help="coordinates sampled per model parameter")
    check.add_argument("--seed", type=int, default=0)

    plan = commands.add_parser("plan-frames", help="print the frame indices a sampler picks")
    plan.add_argument("--t", type=int, required=True, help="clip length in frames")
    plan.add_argument("--n", type=int, required=True, help="frames to sample")
    plan.add_argument("--strategy", type=SamplingStrategy, default=SamplingStrategy.VARIED_OFFSET,
                      help="random, fixed (fixed_offset) or varied (varied_offset)")
    plan.add_argument("--k", type=int, default=0, help="intra-subclip offset for the fixed strategy")
    plan.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_synth_data(args: argparse.Namespace, runtime: RuntimeConfig) -> int:
    dataset = synth_dataset(args.n_clips, args.frames, args.height, args.width, args.seed, args.test_fraction)
    manifest = write_synthetic_dataset(args.out, dataset)
    print(manifest)
    return 0


def _cmd_train(args: argparse.Namespace, runtime: RuntimeConfig) -> int:
    cfg = load_experiment_config(args.config, args.overrides, regime=args.regime)
    if runtime.workers and cfg.train.workers == 0:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"workers": runtime.workers})})
    dataset = build_dataset(cfg.data)
    model = ArchitectureFactory.create(cfg.model, seed=cfg.train.seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_experiment_config(cfg), encoding="utf-8")
    result = train(model, dataset, cfg.train, cfg.preprocess, output_dir=args.out, resume_from=args.resume)
    rho = evaluate(model, dataset.split("test"), cfg.preprocess, cfg.train.eval_batch_size)
    print(f"epochs={len(result.log)} eval_spearman={rho:.4f}")
    return 0


def _cmd_eval(args: argparse.Namespace, runtime: RuntimeConfig) -> int:
    cfg = load_experiment_config(args.config, args.overrides, regime=args.regime)
    model = load_model(args.model)
    pcfg = cfg.preprocess
    if pcfg.crop != model.cfg.image_size:
        pcfg = default_preprocess_config(model.cfg.image_size, normalize=pcfg.normalize)
    test_split = build_dataset(cfg.data).split("test")
    rho = evaluate(model, test_split, pcfg, cfg.train.eval_batch_size)
    print(f"clips={len(test_split)} eval_spearman={rho:.4f}")
    return 0


def _parse_axis_values(raw: Sequence[str], width: int) -> tuple:
    values = []
    for item in raw:
        parts = tuple(item.split(AXIS_VALUE_SEPARATOR)) if width > 1 else (item,)
        if len(parts) != width:
            raise ConfigError(f"sweep value {item!r} needs {width} parts separated by '{AXIS_VALUE_SEPARATOR}'")
        values.append(parts)
    return tuple(values)


def _sweep_spec(args: argparse.Namespace) -> SweepSpec:
    if args.preset:
        spec = get_preset(args.preset)
        if args.config or args.overrides:
            base = load_experiment_config(args.config, args.overrides, regime=args.regime, base=spec.base)
            spec = replace(spec, base=base)
    else:
        if not args.axis or not args.values:
            raise ConfigError("sweep needs --preset, or --axis and --values")
        for key in args.axis:
            resolve_axis(key)
        spec = SweepSpec(
            name="custom",
            base=load_experiment_config(args.config, args.overrides, regime=args.regime),
            axis=tuple(args.axis),
            values=_parse_axis_values(args.values, len(args.axis)),
        )
    return replace(spec, epochs_override=args.epochs, output_path=args.out)


def _cmd_sweep(args: argparse.Namespace, runtime: RuntimeConfig) -> int:
    spec = _sweep_spec(args)
    workers = args.workers if args.workers is not None else runtime.workers
    rows = run_sweep(spec, workers=workers)
    print(render_table(spec, rows), end="")
    failed = [row for row in rows if row.spearman is None]
    for row in failed:
        print(f"row {row.axis_value!r} failed: {row.error}", file=sys.stderr)
    return 1 if failed and len(failed) == len(rows) else 0


def _cmd_grad_check(args: argparse.Namespace, runtime: RuntimeConfig) -> int:
    report = run_suite(args.suite, tol=args.tol, seed=args.seed, coords=args.coords)
    print(f"[{args.suite}] {report.summary()}")
    for name, err in sorted(report.worst_by_param().items()):
        print(f"  {name}: max_rel_err={err:.3e}")
    return 0 if report.passed else 1


def _cmd_plan_frames(args: argparse.Namespace, runtime: RuntimeConfig) -> int:
    cfg = SamplerConfig(strategy=args.strategy, n_frames=args.n, fixed_offset_k=args.k, rng_seed=args.seed)
    print(plan_frames(args.t, cfg))
    return 0


COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "grad-check": _cmd_grad_check,
    "plan-frames": _cmd_plan_frames,
}


def cli(argv: Optional[List[str]] = None, runtime: Optional[RuntimeConfig] = None) -> int:
    """Run one subcommand; returns the process exit code.

    Usage errors exit 2, runtime failures print ``Error: <type>: <message>``
    to stderr and exit 1.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2

    runtime = runtime or RuntimeConfig()
    try:
        diffcore.set_default_dtype(runtime.dtype)
        return COMMANDS[args.command](args, runtime)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130
    except Exception as e:
        logger.debug(f"{args.command} failed", exc_info=True)
        print(f"Error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def run() -> int:
    load_dotenv()
    try:
        runtime = RuntimeConfig.from_env()
    except ConfigError as e:
        print(f"Error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    setup_logging(runtime.log_level, runtime.log_dir)
    return cli(runtime=runtime)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
