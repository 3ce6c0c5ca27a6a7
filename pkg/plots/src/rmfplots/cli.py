"""Command line entry point.

  plot <kind> --in <csv> [--in <csv>] --out <png>

Kinds: tv_vs_M, tlln_loglog, means_overlay, contraction.
"""

from __future__ import annotations

import argparse
import sys

from .figures import KINDS, FigureSpec, PlotError, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plot", description="Render convergence figures from report CSVs"
    )
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--in", dest="inputs", action="append", required=True,
                        help="input CSV (repeatable)")
    parser.add_argument("--out", required=True, help="output PNG path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        image, caption = render(FigureSpec.make(args.kind, args.inputs, args.out))
    except PlotError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {image} and {caption}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
