"""Summary tables (and optional SVG line charts) from a results.csv."""
from __future__ import annotations

import csv
import math
from pathlib import Path

from ..estimators import CSV_COLUMNS, MultioverlapIndex


class ReportError(ValueError):
    """Malformed results file."""


TABLES = {
    "thermal_bound": ("thermal_variance",),
    "quenched_variance": ("quenched_variance", "quenched_mean"),
    "perturbation_gap": ("mean_gap",),
    "decoupling": ("decorrelation", "energy_concentration", "fds", "free_entropy_variance"),
}


def read_results(path) -> list:
    path = Path(path)
    if path.is_dir():
        path = path / "results.csv"
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
                raise ReportError(f"{path}: unexpected header {reader.fieldnames}")
            rows = list(reader)
    except UnicodeDecodeError as exc:
        raise ReportError(f"{path}: {exc}") from None
    for i, r in enumerate(rows, start=2):
        if None in r or any(v is None for v in r.values()):
            raise ReportError(f"{path}:{i}: wrong number of fields")
        try:
            for c in ("N", "n_disorder", "n_blocks"):
                int(r[c])
            for c in ("eps", "s_N", "t", "value", "stderr"):
                float(r[c])
        except ValueError:
            raise ReportError(f"{path}:{i}: non-numeric field") from None
    return rows


def _group_key(r):
    return (r["experiment_id"], r["model"], r["k"], r["estimator"], r["t"], int(r["N"]))


def summarize(rows) -> dict:
    """table name -> list of summary rows (one per experiment/model/k/estimator/t/N)."""
    out = {name: [] for name in TABLES}
    groups = {}
    for r in rows:
        groups.setdefault(_group_key(r), []).append(r)
    for (exp, model, k, name, t, N), rs in sorted(groups.items(), key=lambda kv: kv[0]):
        table = next((tb for tb, prefixes in TABLES.items()
                      if any(name.startswith(p) for p in prefixes)), None)
        if table is None:
            continue
        vals = [float(r["value"]) for r in rs]
        ses = [float(r["stderr"]) for r in rs]
        eps = float(rs[0]["eps"])
        s_N = float(rs[0]["s_N"])
        row = {"experiment_id": exp, "model": model, "estimator": name, "k": k, "t": t, "N": N,
               "eps": eps, "s_N": s_N, "n_rows": len(rs), "value": sum(vals) / len(vals),
               "max_value": max(vals),
               "stderr": math.sqrt(sum(s * s for s in ses)) / len(ses) if len(ses) > 1 else ses[0]}
        if table == "thermal_bound":
            bound = MultioverlapIndex.parse(k).norm2 / (N * eps)
            row["bound"] = bound
            row["violations"] = sum(v > bound + 3 * s for v, s in zip(vals, ses))
        if table == "perturbation_gap":
            row["rate"] = (s_N / N) ** (1.0 / 6.0)
        if name.startswith("energy_concentration"):
            row["sqrt_2s"] = math.sqrt(2 * s_N)
        out[table].append(row)
    return out


def _write_csv(path: Path, rows):
    cols = []
    for r in rows:
        cols.extend(c for c in r if c not in cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: format(v, ".17g") if isinstance(v, float) else v for c, v in r.items()})


def _svg(path: Path, rows, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    series = {}
    for r in rows:
        series.setdefault((r["experiment_id"], r["estimator"], r["k"], r["t"]), []).append(r)
    for key, rs in series.items():
        rs = sorted(rs, key=lambda r: r["N"])
        Ns = [r["N"] for r in rs]
        ax.errorbar(Ns, [r["value"] for r in rs], yerr=[3 * r["stderr"] for r in rs], marker="o",
                    capsize=2, label=" ".join(str(v) for v in key[1:3] if v))
        for extra in ("bound", "rate", "sqrt_2s"):
            if extra in rs[0]:
                ax.plot(Ns, [r[extra] for r in rs], "--", label=f"{extra} {key[2]}".strip())
    ax.set_xscale("log")
    ax.set_xlabel("N")
    ax.set_title(title)
    if series:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_report(results, out_dir=None, svg: bool = False) -> dict:
    """Write one summary CSV per table (and SVGs on request); returns the tables."""
    rows = read_results(results)
    results = Path(results)
    out = Path(out_dir) if out_dir else (results if results.is_dir() else results.parent) / "report"
    out.mkdir(parents=True, exist_ok=True)
    tables = summarize(rows)
    for name, trows in tables.items():
        if not trows:
            continue
        _write_csv(out / f"{name}.csv", trows)
        if svg:
            _svg(out / f"{name}.svg", trows, name.replace("_", " "))
    return tables
