"""Command-line entry point.

Each subcommand runs one pipeline stage against a run directory; ``all``
chains every stage (synthetic scene through report). Configuration merges,
in increasing precedence: built-in defaults, ``--config`` file, environment
variables prefixed ``CROPHEIGHT_`` (double underscore for the section dot,
e.g. ``CROPHEIGHT_FILTER__MAX_SLOPE=6``), then command-line flags.

Exit codes: 0 success, 1 stage failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cropheight",
        description="Tall/short crop mapping pipeline on synthetic desk-scale scenes.",
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {pipeline.__version__}")
    sub = parser.add_subparsers(dest="stage", metavar="STAGE")
    for name in pipeline.STAGES + ("all",):
        stage_parser = sub.add_parser(name, help=f"run the {name} stage")
        stage_parser.add_argument("--config", metavar="PATH",
                                  help="key = value config file")
        stage_parser.add_argument("--seed", type=int, metavar="N",
                                  help="base random seed (overrides config)")
        stage_parser.add_argument("--workers", type=int, metavar="N",
                                  help="worker processes for data-parallel stages")
        stage_parser.add_argument("--out", metavar="DIR",
                                  help="run directory for inputs and outputs")
        stage_parser.add_argument("--set", dest="overrides", action="append",
                                  default=[], metavar="KEY=VALUE",
                                  help="override any config key (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.stage is None:
        parser.print_usage(sys.stderr)
        return 2

    overrides: dict = {}
    for item in args.overrides:
        if "=" not in item:
            print(f"ERROR usage: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    if args.out is not None:
        overrides["out"] = args.out

    try:
        cfg = pipeline.load_config(args.config, overrides)
    except pipeline.ConfigError as exc:
        print(f"ERROR config: {exc}", file=sys.stderr)
        return 2

    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        cfg.dump(cfg.out / "effective_config.cfg")
        pipeline.run_stage(args.stage, cfg)
    except Exception as exc:  # single-line, machine-parsable stage failure
        message = str(exc).replace("\n", " ")
        print(f"ERROR {args.stage}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
