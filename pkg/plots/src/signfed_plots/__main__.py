"""Command line wrapper: manifest in, image out."""

import argparse
import sys

from .render import PANEL_NAMES, PlotError, PlotSpec, render


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="signfed-plots",
        description="Render error and rate-diagnostic panels from a sweep "
                    "or simulate manifest.")
    ap.add_argument("manifest", help="manifest.yaml written by a sweep")
    ap.add_argument("output", help="image path (.png, .pdf, .svg)")
    ap.add_argument("--panels", default=",".join(PANEL_NAMES),
                    help="comma list from {error, ratio} (default: both)")
    ap.add_argument("--linear-x", action="store_true",
                    help="linear x axes instead of log")
    ap.add_argument("--linear-y", action="store_true",
                    help="linear y axes instead of log")
    args = ap.parse_args(argv)

    panels = tuple(p.strip() for p in args.panels.split(",") if p.strip())
    try:
        spec = PlotSpec(manifest=args.manifest, output=args.output,
                        panels=panels, log_x=not args.linear_x,
                        log_y=not args.linear_y)
        out = render(spec)
    except (PlotError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
