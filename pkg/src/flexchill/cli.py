"""Command-line entry point: ``flexchill run|sweep|preset``.

Exit codes: 0 success, 2 configuration or argument error, 3 runtime or I/O
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import (
    PRESETS,
    ConfigError,
    default_jobs,
    parse_config,
    run_experiment,
    run_preset,
    sweep,
    sweep_value,
    SWEEPABLE,
)
from .data import DataFormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("flexchill")


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override [federated] seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log every round")

    p = _ArgumentParser(prog="flexchill", description="Federated learning simulator with temperature-scaled local training.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    run = sub.add_parser("run", parents=[common], help="run one experiment file")
    run.add_argument("config", type=Path)
    run.add_argument("--out", type=Path, default=None, help="output folder (default: [output] dir)")

    sw = sub.add_parser("sweep", parents=[common], help="run an experiment once per value of one key")
    sw.add_argument("config", type=Path)
    sw.add_argument("--key", required=True, help=f"one of: {', '.join(SWEEPABLE)}")
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--out", type=Path, default=None, help="output folder (default: [output] dir)")
    sw.add_argument("--jobs", type=int, default=None, help="runs in parallel (default 1)")

    pr = sub.add_parser("preset", parents=[common], help="run a shipped preset")
    pr.add_argument("name", choices=sorted(PRESETS))
    pr.add_argument("--out", type=Path, required=True)
    pr.add_argument("--idx-dir", type=Path, default=None, help="folder with MNIST-format IDX files (mnist-idx)")
    pr.add_argument("--jobs", type=int, default=None, help="runs in parallel (default 1)")
    return p


def _load(args):
    exp = parse_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        exp.federated.seed = args.seed
    return exp


def _dispatch(args) -> int:
    if args.command == "run":
        exp = _load(args)
        res = run_experiment(exp, args.out)
        print(f"final accuracy {res.summary['final_accuracy']:.4f}; results in {res.out_dir}")
    elif args.command == "sweep":
        exp = _load(args)
        values = [sweep_value(args.key, v) for v in args.values.split(",") if v.strip()]
        if not values:
            raise ConfigError("--values is empty")
        out = args.out if args.out is not None else exp.base_dir / exp.output.dir
        runs = sweep(exp, args.key, values, out, jobs=args.jobs or default_jobs())
        for r in runs:
            print(f"{r['dir']}: final accuracy {r['final_accuracy']:.4f}")
    else:
        runs = run_preset(
            args.name, args.out, seed=args.seed or 0, idx_dir=args.idx_dir, jobs=args.jobs or default_jobs()
        )
        for r in runs:
            print(f"{r['dir']}: final accuracy {r['final_accuracy']:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"flexchill: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, OSError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"flexchill: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
