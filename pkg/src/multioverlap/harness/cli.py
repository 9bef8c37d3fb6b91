"""Command line entry point: ``multioverlap {selftest,oracle-check,run,report}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from ..sampler import SamplerError
from .config import THREADS_ENV, ConfigError, load_config
from .report import ReportError, write_report
from .runner import DiagnosticFailure, oracle_gate, run_experiment

EXIT_OK, EXIT_VALIDATION, EXIT_DIAGNOSTIC, EXIT_IO = 0, 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="multioverlap",
                                description="Multioverlap concentration experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("selftest", help="run the unit and invariant test suite (extra args go to pytest)")
    oc = sub.add_parser("oracle-check", help="compare the sampler with the exact oracles")
    oc.add_argument("--config", required=True)
    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--threads", type=int, default=None,
                     help=f"worker processes (default ${THREADS_ENV} or 1)")
    run.add_argument("--out", default=None, help="output directory (default from config)")
    rep = sub.add_parser("report", help="summarise a results directory")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--svg", action="store_true")
    return p


def _selftest(extra):
    try:
        import pytest
    except ImportError:
        print("pytest is not installed", file=sys.stderr)
        return EXIT_VALIDATION
    here = Path(__file__).resolve()
    tests = next((p / "tests" for p in here.parents if (p / "tests").is_dir()), None)
    if tests is None:
        print("test directory not found (selftest needs a source checkout)", file=sys.stderr)
        return EXIT_IO
    code = pytest.main([str(tests), "-q", "--ignore", str(tests / "test_acceptance.py"), *extra])
    return EXIT_OK if code == 0 else EXIT_DIAGNOSTIC


def main(argv=None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command != "selftest":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            return _selftest(extra)
        if args.command == "oracle-check":
            rep = oracle_gate(load_config(args.config))
            print("\n".join(rep.lines()))
            return EXIT_OK if rep.passed else EXIT_DIAGNOSTIC
        if args.command == "run":
            cfg = load_config(args.config)
            threads = args.threads or int(os.environ.get(THREADS_ENV, 1) or 1)
            res = run_experiment(cfg, args.out, threads)
            print(f"{len(res.rows)} rows -> {res.out_dir / 'results.csv'}"
                  f" ({res.skipped_cells} cells resumed)")
            return EXIT_OK
        if args.command == "report":
            tables = write_report(args.inp, svg=args.svg)
            for name, rows in tables.items():
                if rows:
                    print(f"{name}: {len(rows)} rows")
            return EXIT_OK
    except (ConfigError, ReportError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DiagnosticFailure, SamplerError) as exc:
        print(f"diagnostic failure: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
