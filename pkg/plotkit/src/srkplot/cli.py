"""Command line front end for figure rendering."""

from __future__ import annotations

import argparse
import sys

from .figures import FigureSpec, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="srk-plot",
        description="Render solver history CSVs into log-scale figures",
    )
    parser.add_argument("--csv", action="append", required=True,
                        help="history file; repeat for overlays")
    parser.add_argument("--out", required=True, help="output image (.svg/.png)")
    parser.add_argument("--title", default="")
    args = parser.parse_args(argv)
    try:
        out = render(FigureSpec(csv_paths=args.csv, out=args.out, title=args.title))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
