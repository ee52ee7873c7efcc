"""Command line entry point.

Subcommands: run (execute a config), sweep (vary one axis), verify (full
acceptance suite), enumerate (exhaustive small-case oracle).  Exit codes:
0 success, 1 validation error, 2 prox nonconvergence, 3 acceptance failure.
"""

from __future__ import annotations

import argparse
import sys

from .acceptance import DEFAULT_SEED
from .acceptance import verify as _verify
from .errors import ConfigError, ProxConvergenceError, ValidationError
from .harness import (
    emit_report,
    enumerate_config,
    load_config,
    resolve_threads,
    run_config,
    sweep,
)


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="override the master seed")
    p.add_argument("--threads", type=int, default=None,
                   help="thread budget (beats WCOPT_THREADS and the config)")
    p.add_argument("--out", default=None, help="write the report here")
    p.add_argument("--format", choices=("json", "csv"), default="json",
                   dest="fmt", help="report serialization")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wcopt")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (("run", "execute every grid point of a config"),
                       ("enumerate", "replace Monte Carlo with exhaustive "
                                     "index enumeration (small cases only)")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="experiment config file")
        _common_flags(p)

    p = sub.add_parser("sweep", help="vary one axis of a config")
    p.add_argument("config", help="experiment config file")
    p.add_argument("--axis", choices=("n", "T", "eta"), required=True)
    _common_flags(p)

    p = sub.add_parser("verify", help="run the acceptance suite")
    _common_flags(p)
    return parser


def _write(data: bytes, out: str | None) -> None:
    if out is None:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    else:
        with open(out, "wb") as fh:
            fh.write(data)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            seed = DEFAULT_SEED if args.seed is None else args.seed
            report, ok = _verify(seed, resolve_threads(args.threads, None))
            _write(emit_report(report, args.fmt), args.out)
            return 0 if ok else 3

        config = load_config(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        if args.command == "run":
            report = run_config(config, threads=args.threads)
        elif args.command == "sweep":
            report = sweep(config, args.axis, threads=args.threads)
        else:
            report = enumerate_config(config, threads=args.threads)
        _write(emit_report(report, args.fmt), args.out or config.output_path)
        return 0
    except ValidationError as err:
        print("config validation failed:", file=sys.stderr)
        for violation in err.violations:
            print(f"  - {violation}", file=sys.stderr)
        return 1
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ProxConvergenceError as err:
        print(f"prox solve failed to converge: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
