#!/usr/bin/env python3
"""
ddlab - diffusion distillation lab CLI

Runs the experiment suite against one run directory:

    ddlab train-base --config configs/gmm_ring.json
    ddlab distill --config configs/gmm_ring.json --method regression
    ddlab eval --config configs/gmm_ring.json --set metrics.n_samples=2000
    ddlab report --run-dir runs/gmm_ring

Exit codes:
    0 - success
    1 - any other ddlab error
    2 - invalid configuration
    3 - missing or unreadable artifact
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from ddlab.errors import ArtifactError, ConfigError, ConfigInvalid, DDLabError
from ddlab.experiment import commands
from ddlab.experiment.config import load_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddlab",
        description="Diffusion distillation lab on 2-D toy distributions",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--log-level",
        default=os.environ.get("DDLAB_LOG_LEVEL", "INFO"),
        help="Logging level (default: $DDLAB_LOG_LEVEL or INFO)",
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run config (JSON or YAML)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config field by dotted path (repeatable)")
    common.add_argument("--out", help="Run directory (overrides output_dir)")

    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    gen = subparsers.add_parser("gen-data", parents=[common], help="Write truth samples as CSV")
    gen.add_argument("--n", type=int, help="Number of samples (default: metrics.n_truth)")

    subparsers.add_parser("train-base", parents=[common], help="Train the base denoiser")

    distill = subparsers.add_parser("distill", parents=[common], help="Distill a few-step student")
    distill.add_argument("--method", help="progressive or regression (default: distillation.method)")

    lora = subparsers.add_parser("train-lora", parents=[common], help="Train an attribute slider adapter")
    lora.add_argument("--source", choices=["base", "distilled"], help="Model to train on (default: control.source)")

    sample = subparsers.add_parser("sample", parents=[common], help="Sample one arm")
    sample.add_argument("--arm", help="base, distilled, hybrid or skip (default: sampler.arm)")

    subparsers.add_parser("dt-viz", parents=[common], help="Clean-estimate curves and trajectory panels")
    subparsers.add_parser("eval", parents=[common], help="Compare all sampling arms")

    sweep = subparsers.add_parser("sweep", parents=[common], help="Hybrid sampler sweep")
    sweep.add_argument("--axis", required=True, help="guidance, k or substeps")

    control = subparsers.add_parser("control-transfer", parents=[common], help="Slider transfer between models")
    control.add_argument("--direction", help="base_to_distilled or distilled_to_base (default: control.direction)")

    report = subparsers.add_parser("report", parents=[common], help="Collate a run directory into report.md")
    report.add_argument("--run-dir", help="Run directory (default: the config's output_dir)")
    return parser


def _config(args):
    if not args.config:
        raise ConfigInvalid("--config is required for this command")
    return load_config(Path(args.config), args.overrides, args.out)


def run(args) -> None:
    """Dispatch one parsed command."""
    if args.command == "report":
        if args.run_dir:
            run_dir = Path(args.run_dir)
        elif args.out:
            run_dir = Path(args.out)
        else:
            run_dir = Path(_config(args).output_dir)
        out = commands.cmd_report(run_dir)
        print(f"Report: {out}")
        return

    config = _config(args)
    if args.command == "gen-data":
        result = commands.cmd_gen_data(config, n=args.n)
    elif args.command == "train-base":
        result = commands.cmd_train_base(config)
    elif args.command == "distill":
        result = commands.cmd_distill(config, method=args.method)
    elif args.command == "train-lora":
        result = commands.cmd_train_lora(config, source=args.source)
    elif args.command == "sample":
        result = commands.cmd_sample(config, arm=args.arm)
    elif args.command == "dt-viz":
        result = commands.cmd_dtviz(config)
    elif args.command == "eval":
        result = commands.cmd_eval(config)
    elif args.command == "sweep":
        result = commands.cmd_sweep(config, axis=args.axis)
    elif args.command == "control-transfer":
        result = commands.cmd_control(config, direction=args.direction)
    else:
        raise DDLabError(f"Unknown command: {args.command}")

    print(f"{result['stage']} -> {config.output_dir}")
    print("=" * 50)
    for path in result["artifacts"]:
        print(f"  {path}")
    for name, count in sorted(result["evaluations"].items()):
        print(f"  evaluations[{name}] = {count}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_ERROR

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        run(args)
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as e:
        print(f"Artifact error: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except DDLabError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
