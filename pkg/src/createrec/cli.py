"""Command line: ``createrec {prepare,train,evaluate,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from createrec import experiment
from createrec.config import ConfigError, load_config

logger = logging.getLogger("createrec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="experiment YAML file")
    p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry by dotted path, e.g. training.lr=0.002")
    p.add_argument("--data-dir", default="data", help="where prepared bundles live (default: data)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="createrec", description="Sequential + graph recommender with representation alignment.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="ingest and split a dataset into a bundle")
    _add_config_args(p)

    p = sub.add_parser("train", help="train every seed of a config")
    _add_config_args(p)
    p.add_argument("--runs-dir", default="runs", help="root of the run directories (default: runs)")

    p = sub.add_parser("evaluate", help="test metrics for trained run directories")
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--data-dir", default="data")
    p.add_argument("--baselines", action="store_true", help="add Random and PopRnd columns")
    p.add_argument("--out", type=Path, default=None, help="also write the joint table here")

    p = sub.add_parser("report", help="plots and tables from evaluated runs")
    p.add_argument("run_dirs", nargs="*", type=Path)
    p.add_argument("--out", type=Path, default=Path("report"))
    p.add_argument("--no-plots", action="store_true", help="write the tabular files only")
    return parser


def _print_table(rows: list[list[str]]) -> None:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())


def run(args: argparse.Namespace) -> int:
    if args.command == "prepare":
        cfg = load_config(args.config, args.override)
        out, bundle = experiment.prepare(cfg, args.data_dir)
        print(json.dumps({"bundle": str(out), **bundle.summary()}, sort_keys=True, indent=1))
    elif args.command == "train":
        cfg = load_config(args.config, args.override)
        rd = experiment.train(cfg, args.data_dir, args.runs_dir)
        print(rd)
    elif args.command == "evaluate":
        for rd in args.run_dirs:
            if not (rd / "config.yaml").exists():
                raise UsageError(f"{rd} is not a run directory (no config.yaml)")
        _print_table(experiment.evaluate_runs(args.run_dirs, args.data_dir, args.baselines, args.out))
    elif args.command == "report":
        if not args.run_dirs:
            raise UsageError("report needs at least one run directory")
        for name, path in experiment.report(args.run_dirs, args.out, plots=not args.no_plots).items():
            print(f"{name}\t{path}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report and exit 2
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
