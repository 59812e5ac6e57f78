"""Command line entry point.

    playerfl run <config> [--out DIR] [--seeds 0,1,2] [--threads N]
    playerfl curves <config> [--out DIR] [--seeds ...] [--threads N]

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import parse_config
from .exceptions import ConfigError, PlayerFLError
from .harness import compute_layer_curves, emit_layer_curves, emit_results, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _seed_list(text: str) -> list:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("seeds must be a non-empty list of non-negative integers")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="playerfl", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "train every configured algorithm and write results tables"),
        ("curves", "write per-layer diagnostic curves after one epoch"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("config", help="path to a YAML experiment config")
        cmd.add_argument("--out", help="output directory (overrides output_dir)")
        cmd.add_argument("--seeds", type=_seed_list, help="comma-separated seeds (overrides seeds)")
        cmd.add_argument("--threads", type=int, default=1, help="worker processes for independent cells")
        cmd.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = parse_config(args.config)
        if args.seeds:
            config = replace(config, seeds=args.seeds)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or str(config.resolve(config.output_dir))
    try:
        if args.command == "run":
            bundle = run_experiment(config, workers=args.threads)
            files = emit_results(bundle, out)
        else:
            bundle = compute_layer_curves(config, workers=args.threads)
            files = emit_layer_curves(bundle, out)
    except (PlayerFLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
