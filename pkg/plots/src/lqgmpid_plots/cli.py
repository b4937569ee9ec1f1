"""Command-line entry point: ``plots render --run <dir> --figure <id> --out <png>``."""

from __future__ import annotations

import argparse
import sys

from .figures import FIGURES, panel_spec, render

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plots",
        description="Render figure panels from experiment run directories.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_render = sub.add_parser("render", help="render one figure panel to a PNG")
    p_render.add_argument("--run", required=True, help="run directory to read")
    p_render.add_argument("--figure", required=True, choices=sorted(FIGURES),
                          help="figure identifier")
    p_render.add_argument("--out", required=True, help="output image path")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        spec = panel_spec(args.figure, args.run, args.out)
        out = render(spec)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
