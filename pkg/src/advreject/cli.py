"""Command-line entry point: ``advreject <subcommand> --config cfg.json --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import PRESETS, ConfigError, load_config, preset_config
from .pipeline import STAGES, Pipeline, StageError

log = logging.getLogger("advreject")


def _load(args):
    if args.config and args.preset:
        raise ConfigError("use either --config or --preset, not both")
    if args.preset:
        return preset_config(args.preset)
    if not args.config:
        raise ConfigError("--config or --preset is required")
    return load_config(args.config)


def build_parser():
    parser = argparse.ArgumentParser(prog="advreject", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_args(p):
        p.add_argument("--config", help="experiment JSON config")
        p.add_argument("--preset", choices=sorted(PRESETS), help="use a built-in config instead of --config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="rerun stages even if their outputs are current")

    for stage in STAGES:
        add_run_args(sub.add_parser(stage, help=f"run the {stage} stage"))
    p = sub.add_parser("run-all", help="run every stage (skipping up-to-date ones)")
    add_run_args(p)
    p.add_argument("--stage", action="append", choices=STAGES, help="restrict to these stages (repeatable)")

    p = sub.add_parser("show-config", help="print a preset (or validated config) as JSON")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "show-config":
            if not args.config and not args.preset:
                args.preset = "digits"
            json.dump(_load(args), sys.stdout, indent=1, sort_keys=True)
            sys.stdout.write("\n")
            return 0
        cfg = _load(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        log.error("invalid configuration: %s", exc)
        return 2
    stages = args.stage if args.command == "run-all" and args.stage else None
    if args.command != "run-all":
        stages = [args.command]
    try:
        Pipeline(cfg, args.out, force=args.force).run(stages)
    except StageError as exc:
        log.error("%s", exc)
        return 10 + exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
