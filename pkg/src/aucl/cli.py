"""Command line entry point: ``aucl run | compare | sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import harness


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aucl", description="Cooperative UWB localization runs")
    p.add_argument("-v", "--verbose", action="store_true", help="log filter diagnostics")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every configured variant on one seed")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=None, help="defaults to the config's seed")
    r.add_argument("--out", required=True)
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field by dotted path, e.g. world.R=0.02")

    c = sub.add_parser("compare", help="median/IQR table over finished runs")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--json", action="store_true", help="print JSON instead of a table")

    s = sub.add_parser("sweep", help="run a range of seeds and compare them")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", required=True, help="a..b (inclusive) or a comma list")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=None)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return harness.run(args.config, args.seed, args.out, args.set)
    if args.command == "compare":
        try:
            cmp = harness.compare(args.dirs)
        except harness.CompareError as exc:
            print(exc, file=sys.stderr)
            return harness.EXIT_CONFIG
        print(json.dumps(cmp, indent=2, sort_keys=True) if args.json
              else harness.format_table(cmp))
        return harness.EXIT_OK
    try:
        seeds = harness.parse_seed_range(args.seeds)
    except ValueError as exc:
        print(f"bad --seeds: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    jobs = args.jobs if args.jobs is not None else harness.default_jobs()
    return harness.sweep(args.config, seeds, args.out, args.set, jobs)


if __name__ == "__main__":
    sys.exit(main())
