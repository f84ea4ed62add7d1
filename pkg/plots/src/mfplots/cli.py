"""Batch CLI: mflab-plot --kind K --in CSV [CSV ...] --out PATH."""
import argparse
import sys

from .jobs import KINDS, PlotJob, SchemaError
from .render import render


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mflab-plot",
        description="Render one figure from mflab CSV artifacts.")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   metavar="CSV")
    p.add_argument("--out", required=True, metavar="PATH")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        meta = render(PlotJob(tuple(args.inputs), args.kind, args.out))
    except (SchemaError, ValueError, FileNotFoundError) as e:
        print(f"plot error: {e}", file=sys.stderr)
        return 2
    bits = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
    print(f"wrote {args.out}" + (f" ({bits})" if bits else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
