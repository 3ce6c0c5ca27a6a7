"""Command line entry point.

  simtool <subcommand> --config <file> --out <dir> [--seed N] [--threads N] [--force]

Subcommands: gl, rmf, limit, phi, convergence, stein, mgf.
Exit codes: 0 all checks passed, 1 a check failed, 2 execution error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import SimError
from .experiments import RUNNERS, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simtool",
        description="Replica-system simulation and convergence verification",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--threads", type=int, default=None,
                       help="compute threads (deterministic regardless)")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out_dir, checks, manifest = run_experiment(
            args.config, args.subcommand, args.out,
            seed=args.seed, threads=args.threads, force=args.force,
        )
    except SimError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for name, ok in checks.items():
        if isinstance(ok, bool):
            print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"wrote {out_dir} (config {manifest['config_hash'][:12]})")
    failed = [n for n, ok in checks.items() if isinstance(ok, bool) and not ok]
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
