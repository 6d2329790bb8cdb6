"""Command-line entry point.

Exit status: 0 when every gate passes, 1 on a gate failure or a runtime
invariant violation, 2 on a bad config, 3 on an I/O error.
"""

import argparse
import sys

from . import __version__
from .estimators import ConstraintError
from .harness import KINDS, ConfigError, ExperimentConfig, run, summarize

EXIT_OK, EXIT_GATE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def build_parser():
    parser = argparse.ArgumentParser(prog="rarelab", description="Rare-event gradient estimation experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="kind", required=True, metavar="EXPERIMENT")
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", help="YAML experiment config (default: the committed config for this experiment)")
        p.add_argument("--seed", type=int, help="master seed, overrides the config")
        p.add_argument("--out", help="base directory for run output, overrides the config")
        p.add_argument("--jobs", type=int, help="worker processes, overrides the config")
        p.add_argument("--format", choices=("csv", "json"), default="csv", help="table format (default csv)")
    return parser


def load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.default(args.kind)
    if cfg.kind != args.kind:
        raise ConfigError("kind", f"config is for {cfg.kind!r}, not {args.kind!r}")
    return cfg.replace(seed=args.seed, out=args.out, jobs=args.jobs)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        result = run(cfg, fmt=args.format)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConstraintError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_GATE
    sys.stdout.write(summarize(result))
    print(f"output: {result.out_dir}")
    return EXIT_OK if result.passed else EXIT_GATE


if __name__ == "__main__":
    sys.exit(main())
