"""Run experiment configs through the harness and write their reports.

    python3 scripts/run_experiments.py                      # every config in configs/
    python3 scripts/run_experiments.py configs/smoke.json --threads 4 --svg
"""
import argparse
import logging
import sys
import time
from pathlib import Path

from multioverlap.harness.config import load_config
from multioverlap.harness.report import write_report
from multioverlap.harness.runner import run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("configs", nargs="*", type=Path)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--svg", action="store_true")
    p.add_argument("--skip", nargs="*", default=["smoke"], help="config stems to skip when running all")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    paths = args.configs or sorted(c for c in (ROOT / "configs").glob("*.json") if c.stem not in args.skip)
    for path in paths:
        cfg = load_config(path)
        out = ROOT / cfg.output
        t0 = time.time()
        res = run_experiment(cfg, out, args.threads)
        write_report(out, svg=args.svg)
        logging.info("%s: %d rows, %d cells resumed, %.0fs -> %s", path.name, len(res.rows),
                     res.skipped_cells, time.time() - t0, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
