"""Command-line entry point: ``fockdamp <stage> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .io import ArtifactError
from .pipeline import STAGES, StageDependencyError, run_pipeline

# exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_DEPENDENCY = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fockdamp",
        description="Simulate QND photon counting in a damped cavity and reconstruct "
                    "the photon-number relaxation process.")
    p.add_argument("stage", choices=STAGES + ("all",),
                   help="pipeline stage to run; 'all' runs every stage in order")
    p.add_argument("-c", "--config", help="INI config file ([section] key = value)")
    p.add_argument("-o", "--out", default="artifacts", help="artifact directory (default: %(default)s)")
    p.add_argument("-s", "--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config field; repeatable")
    p.add_argument("--seed", type=int, help="master seed (same as --set run.seed=N)")
    p.add_argument("--sequences", type=int, help="sequence count (same as --set run.sequences=N)")
    p.add_argument("--ingest", metavar="PATH",
                   help="validate and use this sequence file instead of simulating")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _error(kind: str, message: str, code: int) -> int:
    # single machine-parsable line: fockdamp-error<TAB>kind<TAB>message
    print(f"fockdamp-error\t{kind}\t{message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.sequences is not None:
        overrides.append(f"run.sequences={args.sequences}")
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        return _error("config", str(exc), EXIT_CONFIG)
    if args.print_config:
        print(cfg.to_ini(), end="")
        return EXIT_OK
    try:
        out = run_pipeline(cfg, [args.stage], args.out, sequences_file=args.ingest)
    except StageDependencyError as exc:
        return _error("dependency", str(exc), EXIT_DEPENDENCY)
    except ArtifactError as exc:
        return _error("input", str(exc), EXIT_INPUT)
    except ConfigError as exc:
        return _error("config", str(exc), EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001
        return _error(type(exc).__name__, str(exc), EXIT_FAILURE)
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
