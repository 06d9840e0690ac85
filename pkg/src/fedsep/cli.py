"""Command-line experiment runner.

    fedsep <command> --config <path> [--set key=value]... --out <dir> --seed <u64>

Commands: pi-vs-r, toy-bias, synth-debias, mixing, estimator-rate,
evolution. Each writes one CSV per result table plus manifest.json with the
fully resolved config. Exit codes: 0 success, 2 validation error,
3 feasibility error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import sys

from .config import EXPERIMENTS, apply_overrides, load_config_file, resolve_config
from .errors import FeasibilityError, NumericalError, ValidationError
from .experiments import RUNNERS

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_FEASIBILITY = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsep",
        description="Experiment harness for federated learning under "
        "minimum-separation client participation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        cmd = sub.add_parser(name, help=f"run the {name} experiment")
        cmd.add_argument("--config", help="JSON config file (defaults apply if omitted)")
        cmd.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            dest="overrides",
            help="dotted-path config override; flags win over the file",
        )
        cmd.add_argument("--out", required=True, help="output directory")
        cmd.add_argument("--seed", type=int, default=None, help="master seed override")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        user = load_config_file(args.config) if args.config else {}
        user = apply_overrides(user, args.overrides)
        if args.seed is not None:
            user["seed"] = args.seed
        resolved = resolve_config(args.command, user)
        RUNNERS[args.command](resolved, args.out)
    except ValidationError as exc:
        print(f"fedsep: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FeasibilityError as exc:
        print(f"fedsep: feasibility error: {exc}", file=sys.stderr)
        return EXIT_FEASIBILITY
    except NumericalError as exc:
        print(f"fedsep: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
