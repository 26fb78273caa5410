"""Command-line interface.

Subcommands: track, pib-train, oracle-validate, sweep, compare, plot-data.
Global flags --config/--seed/--out; the subcommand fixes the experiment kind
(except `sweep`, whose axis comes from the config's `experiment` key).
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, ParseError
from .harness import EXPERIMENTS, emit_plot_data, load_config, run


def _add_common(parser):
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config's seed list with one seed")
    parser.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weightinfo")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, kind in (
        ("track", "track"),
        ("pib-train", "pib_train"),
        ("oracle-validate", "oracle_validate"),
        ("compare", "compare_regularizers"),
    ):
        p = sub.add_parser(name, help=f"run the {kind} experiment")
        _add_common(p)
        p.set_defaults(kind=kind)

    p = sub.add_parser("sweep", help="run a sweep; config 'experiment' names the axis (sweep_*)")
    _add_common(p)
    p.set_defaults(kind="sweep")

    p = sub.add_parser("plot-data", help="flatten metric CSVs into long-format (series,x,y) rows")
    p.add_argument("csvs", nargs="*", help="metrics CSV files")
    p.add_argument("--out", required=True, help="output CSV path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot-data":
            count = emit_plot_data(args.csvs, args.out)
            print(f"wrote {count} rows to {args.out}")
            return 0
        overrides = {}
        if args.seed is not None:
            overrides["seeds"] = [args.seed]
        if args.kind != "sweep":
            overrides["experiment"] = args.kind
        cfg = load_config(args.config, overrides)
        if args.kind == "sweep":
            if cfg.experiment is None or not cfg.experiment.startswith("sweep_"):
                raise ConfigError(
                    f"sweep needs config 'experiment' set to one of "
                    f"{[e for e in EXPERIMENTS if e.startswith('sweep_')]}"
                )
        return run(cfg, args.out)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
