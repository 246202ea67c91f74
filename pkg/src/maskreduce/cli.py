"""Command line entry point: ``maskreduce {run,summarize,selftest}``."""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import harness, selftest
from .errors import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskreduce", description="Sparse-gradient all-reduce experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (bandwidth, mode) cell of an experiment config")
    run.add_argument("config", type=Path)
    run.add_argument("--seed", type=int, help="override [train] seed")
    run.add_argument("--out", type=Path, help="override [experiment] output directory")
    run.add_argument("--transport", choices=("sim", "tcp"), help="override [experiment] transport")
    run.add_argument("--parallel", action="store_true", help="run cells in worker processes")
    run.add_argument("-q", "--quiet", action="store_true")

    summ = sub.add_parser("summarize", help="recompute the summary table from per-cell CSVs")
    summ.add_argument("directory", type=Path)

    sub.add_parser("selftest", help="run quick built-in oracle checks")
    return parser


def _cmd_run(args) -> int:
    try:
        cfg = harness.parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    changes = {}
    if args.seed is not None:
        changes["train"] = cfg.train.with_(seed=args.seed)
    if args.out is not None:
        changes["output"] = args.out
    if args.transport is not None:
        changes["transport"] = args.transport
    if args.parallel:
        changes["parallel"] = True
    cfg = dataclasses.replace(cfg, **changes)

    log = (lambda *a, **k: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        records = harness.run_experiment(cfg, log=log)
    except Exception as exc:  # noqa: BLE001
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print((Path(cfg.output) / "summary.txt").read_text(encoding="utf-8"), end="")
    return EXIT_FAILURE if any(r.error for r in records) else EXIT_OK


def _cmd_summarize(args) -> int:
    try:
        harness.summarize_dir(args.directory)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, KeyError) as exc:
        print(f"summarize failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print((args.directory / "summary.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "summarize":
        return _cmd_summarize(args)
    return EXIT_OK if selftest.run() else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
