"""``ut-transfer <stage> --config <path> [--out <dir>] [--seed <n>] [--jobs <n>]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, load_config
from .pipeline import ALL, STAGES, run_pipeline

JOBS_ENV = "UT_TRANSFER_JOBS"


def _default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV, "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError([f"${JOBS_ENV}: expected a positive integer, got {raw!r}"]) from None
    if n < 1:
        raise ConfigError([f"${JOBS_ENV}: expected a positive integer, got {raw!r}"])
    return n


class _Parser(argparse.ArgumentParser):
    # usage mistakes are validation errors (exit 1), not argparse's default 2
    def error(self, message):
        raise ConfigError([message])


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ut-transfer",
                                description="Train surrogates, sweep their checkpoints and diagnose transfer.")
    p.add_argument("stage", choices=STAGES + (ALL,))
    p.add_argument("--config", required=True, help="experiment TOML file")
    p.add_argument("--out", help="output directory (default: experiment.output from the config)")
    p.add_argument("--seed", type=int, help="override experiment.seed")
    p.add_argument("--jobs", type=int, help=f"worker threads (default ${JOBS_ENV} or 1)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"ut-transfer: {'; '.join(exc.problems)}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        jobs = args.jobs if args.jobs is not None else _default_jobs()
        if jobs < 1:
            raise ConfigError([f"--jobs: must be >= 1, got {jobs}"])
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        print(f"ut-transfer: {exc}", file=sys.stderr)
        return 1
    result = run_pipeline(cfg, args.stage, out=args.out, jobs=jobs)
    if result.status:
        print(f"ut-transfer {args.stage}: {result.message}", file=sys.stderr)
    else:
        for path in result.artifacts:
            print(path)
    return result.status


if __name__ == "__main__":
    sys.exit(main())
