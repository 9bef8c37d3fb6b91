"""Print value-vs-N series (with 3-sigma intervals and reference curves) from a results directory.

    python3 scripts/scaling_table.py results/replica_symmetry_quadratic
"""
import sys

from multioverlap.harness.report import read_results, summarize


def main(path):
    tables = summarize(read_results(path))
    for name, rows in tables.items():
        if not rows:
            continue
        print(f"== {name}")
        series = {}
        for r in rows:
            series.setdefault((r["estimator"], r["k"], r["t"]), []).append(r)
        for (estimator, k, t), rs in sorted(series.items()):
            print(f"  {estimator} k={k or '-'} t={t}")
            for r in sorted(rs, key=lambda r: r["N"]):
                ref = next((f"{c}={r[c]:.4g}" for c in ("bound", "rate", "sqrt_2s") if c in r), "")
                print(f"    N={r['N']:>5}  {r['value']:.5g} +- {3 * r['stderr']:.2g}  {ref}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else "results/smoke"))
