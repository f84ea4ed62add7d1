"""Command line front end.

Subcommands:
  simulate   one or more particle runs (writes records + trajectories)
  pde-solve  grid transport of the configured density family
  diagnose   summarize an existing records.csv
  sweep      full Ns x seeds particle sweep
  fit-rate   log-log rate fit over a records.csv
  gap        two-density stability experiment

Exit codes: 0 success, 2 configuration problems, 3 runtime failures
(CFL violation, shock, particle collision, out-of-regime diagnostics,
extrapolation outside the computational box).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .harness import (
    ConfigError,
    apply_overrides,
    config_hash,
    diagnose_records,
    fit_rate_from_csv,
    load_config,
    run_gap_experiment,
    run_pde,
    run_sweep,
)
from .kernel import KernelSingularityError
from .meanfield import CFLError, ExtrapolationError, ShockError
from .modenergy import OutOfRegimeError
from .particles import CollisionError

RUNTIME_ERRORS = (CFLError, ShockError, CollisionError, OutOfRegimeError,
                  ExtrapolationError)


def _add_common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
    if needs_config:
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                       help="dotted config override, repeatable")
        p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, fixed reduction order")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: MFLAB_THREADS or auto)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mflab",
                                 description="interacting-particle flows, grid "
                                             "transport, and energy diagnostics")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "particle run(s) with diagnostics"),
                        ("sweep", "Ns x seeds particle sweep"),
                        ("pde-solve", "grid transport of the density family"),
                        ("gap", "two-density stability experiment")):
        _add_common(sub.add_parser(name, help=help_))
    for name, help_ in (("diagnose", "summarize a records.csv"),
                        ("fit-rate", "log-log N-rate fit over a records.csv")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("records", help="path to a records.csv")
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--threads", type=int, default=None)
    return ap


def _resolve(args) -> dict:
    cfg = load_config(args.config)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.out:
        cfg = dict(cfg, out=args.out)
    return cfg


def _threads(args) -> int | None:
    if args.deterministic:
        return 1
    return args.threads


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("simulate", "sweep"):
            cfg = _resolve(args)
            if args.command == "simulate":
                cfg["diagnostics"] = dict(cfg["diagnostics"], trajectories=True)
            records, out = run_sweep(cfg, threads=_threads(args))
            final = max(r.t for r in records)
            print(f"wrote {len(records)} records to {out} "
                  f"(config {config_hash(cfg)[:12]}, final t={final:g})")
        elif args.command == "pde-solve":
            cfg = _resolve(args)
            report = run_pde(cfg)
            print(json.dumps(report, indent=2, sort_keys=True))
        elif args.command == "gap":
            cfg = _resolve(args)
            summary = run_gap_experiment(cfg)
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "diagnose":
            print(json.dumps(diagnose_records(args.records), indent=2,
                             sort_keys=True))
        elif args.command == "fit-rate":
            fit = fit_rate_from_csv(args.records)
            print(json.dumps(dataclasses.asdict(fit), indent=2, sort_keys=True))
        return 0
    except RUNTIME_ERRORS as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    except (ConfigError, KernelSingularityError, FileNotFoundError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
