"""Command-line entry point: ``pmmoe <command> [--config PATH] [--seed N] [--out DIR] [--workers N]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings

import yaml

from pmmoe import harness
from pmmoe.config import ExperimentConfig, defaults_text, load_config
from pmmoe.errors import ConfigError, FormatError, StageError
from pmmoe.plots import emit_plots

EXIT_STAGE = 1
EXIT_CONFIG = 2

STAGE_FUNCS = {
    "partition": harness.stage_partition,
    "pretrain": harness.stage_pretrain,
    "finetune": harness.stage_finetune,
    "theorem": harness.stage_theorem,
    "eval": harness.stage_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmmoe", description="Two-phase personalized federated mixture-of-experts runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--workers", type=int, help="thread pool size for client work")

    help_text = {
        "partition": "generate or load data and write the client partition",
        "pretrain": "run the federated pre-training rounds and save checkpoints",
        "finetune": "train per-client gates over the frozen pools",
        "theorem": "check the mixture accuracy bound on a fixed grid",
        "eval": "compare pre-trained and gated accuracy per client",
        "run": "all of the above, in order, into a fresh output directory",
    }
    for name, text in help_text.items():
        sub.add_parser(name, parents=[common], help=text)

    plot = sub.add_parser("plot", help="draw SVG line charts from a metrics CSV")
    plot.add_argument("csv", nargs="+", help="metrics CSV file(s)")
    plot.add_argument("--out", help="output directory (default: next to each CSV)")

    conf = sub.add_parser("config", help="show configuration")
    conf.add_argument("--defaults", action="store_true", help="print every key with its default")
    conf.add_argument("--config", help="print the resolved version of this file")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "out", "workers") if getattr(args, k, None) is not None}
    return cfg.replace(**overrides) if overrides else cfg


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("PMMOE_LOG", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)

    if args.command == "config":
        if args.defaults or not args.config:
            sys.stdout.write(defaults_text())
            return 0
        try:
            cfg = resolve_config(args)
        except ConfigError as e:
            print(f"pmmoe: config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        sys.stdout.write(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
        return 0

    if args.command == "plot":
        try:
            for path in args.csv:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    written = emit_plots(path, args.out or os.path.dirname(os.path.abspath(path)))
                for w in caught:
                    print(f"pmmoe: warning: {w.message}", file=sys.stderr)
                for p in written:
                    print(p)
        except (FormatError, OSError) as e:
            print(f"pmmoe: plot error: {e}", file=sys.stderr)
            return EXIT_STAGE
        return 0

    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"pmmoe: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            summary = harness.run_experiment(cfg)
            print(summary.to_json(), end="")
            return 0
        out = harness.open_output(cfg)
        try:
            result = harness.run_stage(args.command, STAGE_FUNCS[args.command], cfg, out)
        except StageError as e:
            harness.write_manifest(out.root, False, f"stage {e.stage} failed")
            raise
        harness.write_manifest(out.root, True)
        if args.command == "eval":
            print(result.to_json(), end="")
        elif args.command == "theorem":
            print(out.theorem.read_text(), end="")
        return 0
    except StageError as e:
        print(f"pmmoe: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
