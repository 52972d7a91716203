"""Command-line entry point.

Exit codes: 0 success, 1 failed verification assertions or solver errors,
2 configuration errors.  ``WAVEHJB_SEED`` overrides the config seed after
validation, which is handy for replaying a run with fresh noise without
touching the config file.
"""

from __future__ import annotations

import argparse
import os
import sys

from wavehjb import __version__
from wavehjb.config import ConfigError, load_config
from wavehjb.pipelines import PIPELINES, PipelineError, run_pipeline

_COMMAND_HELP = {
    "simulate": "sample uncontrolled trajectories and summarize the field",
    "solve-bsde": "regression solve of the backward equation along OU paths",
    "solve-hjb": "fixed-point solve of the value equation on a state cloud",
    "synthesize": "solve the value equation and roll out its feedback law",
    "verify": "run the configured cross-checks and report margins",
    "audit-smoothing": "measure the gradient-smoothing constant vs sigma",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wavehjb",
        description="Solver and verification harness for the stochastic "
                    "wave control problem.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in PIPELINES:
        p = sub.add_parser(name, help=_COMMAND_HELP[name])
        p.add_argument("--config", required=True,
                       help="path to the JSON configuration file")
        p.add_argument("--output", required=True,
                       help="output directory (created; must not exist "
                            "non-empty)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, raw = load_config(args.config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    override = os.environ.get("WAVEHJB_SEED")
    if override is not None:
        try:
            cfg["seed"] = int(override)
        except ValueError:
            print(f"config error: WAVEHJB_SEED must be an integer, "
                  f"got {override!r}", file=sys.stderr)
            return 2
    try:
        return run_pipeline(args.command, cfg, raw, args.output)
    except (PipelineError, RuntimeError, FloatingPointError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
