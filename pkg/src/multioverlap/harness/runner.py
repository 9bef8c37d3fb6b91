"""Seeded sweeps over (N, t, disorder) cells, with crash-safe persistence and an oracle gate.

Layout of an output directory::

    config.json          the validated configuration
    cells/*.npz          one file per finished cell (replica samples and acceptance)
    results.csv          assembled from the cells in canonical order

Cells are grouped into fixed chunks of ``chunk_disorders`` disorder samples;
a chunk is the unit of work handed to a worker.  Because the chunking does not
depend on the number of workers and every chain draws from its own stream,
the results are byte-identical for any thread count.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import estimators as est
from ..models import make_disorder
from ..oracle import separable_site_moments
from ..perturbation import PerturbationIndex
from ..rng import derive_seed_sequence
from ..sampler import McmcConfig, ReplicaEnsemble, SamplerError, diagnostics, sample_ensembles
from .config import THREADS_ENV, ExperimentConfig, config_from_dict

log = logging.getLogger(__name__)


class DiagnosticFailure(RuntimeError):
    """A chain failed its convergence diagnostics or the oracle gate failed."""


# --------------------------------------------------------------------------
# seeds and systems


def disorder_labels(cfg: ExperimentConfig, N: int, d: int) -> tuple:
    # t is deliberately absent: t = 0 and t = 1 share J, pi and lambda
    return ("disorder", cfg.seed, cfg.model, N, d)


def chain_labels(cfg: ExperimentConfig, N: int, d: int) -> tuple:
    return ("chain", cfg.seed, cfg.model, N, d)


def build_system(cfg: ExperimentConfig, N: int, t: float, d: int):
    s_N = cfg.schedule.s_N(N)
    model, disorder = make_disorder(cfg.model, N, cfg.model_params, disorder_labels(cfg, N, d),
                                    s_N, t, cfg.policy)
    if cfg.lambda_groups:
        # disorders in one group share lambda, so E_lambda can sit outside the disorder average
        g = d % cfg.lambda_groups
        gen = np.random.Generator(np.random.Philox(
            derive_seed_sequence("lambda", cfg.seed, cfg.model, N, g)))
        lam = gen.uniform(0.5, 1.0, size=len(disorder.perturbation.truncation))
        disorder = disorder.with_perturbation(disorder.perturbation.with_lambdas(lam))
    return model, disorder


def cell_name(N: int, t: float, d: int) -> str:
    return f"N{N}_t{t!r}_d{d}"


# --------------------------------------------------------------------------
# atomic file helpers


def _atomic_write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _save_cell(path: Path, samples, acceptance):
    buf = io.BytesIO()
    np.savez(buf, samples=samples, acceptance=acceptance)
    _atomic_write_bytes(path, buf.getvalue())


def _load_cell(path: Path):
    with np.load(path) as z:
        return z["samples"], z["acceptance"]


# --------------------------------------------------------------------------
# workers


def _check_diagnostics(ens: ReplicaEnsemble, threshold: float):
    if ens.traces is None or ens.traces.shape[0] < 4:
        return
    rep = diagnostics(ens, threshold)
    if rep.failed:
        worst = int(np.nanargmax(rep.rhat))
        raise DiagnosticFailure(
            f"chain {ens.lineage}: split R-hat {rep.rhat[worst]:.4f} > {threshold} at traced "
            f"site {worst}; {'; '.join(rep.messages)}")


def _run_chunk(cfg_json: str, N: int, t: float, ds: list, out: str, rhat_threshold: float):
    import json
    cfg = config_from_dict(json.loads(cfg_json), env={})
    eps = cfg.schedule.eps_N(N)
    systems = [build_system(cfg, N, t, d) for d in ds]
    seeds = [chain_labels(cfg, N, d) for d in ds]
    ensembles = sample_ensembles(systems, eps, cfg.n_replicas, cfg.mcmc, seeds)
    for d, ens in zip(ds, ensembles):
        _check_diagnostics(ens, rhat_threshold)
        _save_cell(Path(out) / "cells" / f"{cell_name(N, t, d)}.npz", ens.samples, ens.acceptance)
    return ds


def _load_ensembles(cfg: ExperimentConfig, out: Path, N: int, t: float):
    eps = cfg.schedule.eps_N(N)
    ens = []
    for d in range(cfg.n_disorder):
        model, disorder = build_system(cfg, N, t, d)
        samples, acc = _load_cell(out / "cells" / f"{cell_name(N, t, d)}.npz")
        ens.append(ReplicaEnsemble(model, disorder, eps, samples, acc, cfg.mcmc.burn_in, cfg.mcmc,
                                   None, chain_labels(cfg, N, d)))
    return ens


# --------------------------------------------------------------------------
# estimator evaluation


def _k_list(params):
    ks = params.get("k", ["1-1"])
    ks = ks if isinstance(ks, list) else [ks]
    return [est.MultioverlapIndex.parse(k) for k in ks]


def _index(params):
    return PerturbationIndex(tuple(params.get("I", [0, 1])))


def _row(cfg, N, t, k, name, e: est.Estimate):
    return est.estimate_row(cfg.experiment_id, cfg.model, N, cfg.schedule.eps_N(N),
                            cfg.schedule.s_N(N), t, k, name, e, cfg.seed)


def cell_rows(cfg: ExperimentConfig, ens: ReplicaEnsemble, N: int, t: float):
    rows = []
    for spec in cfg.estimators:
        if spec.name == "thermal_variance":
            for k in _k_list(spec.params):
                rows.append(_row(cfg, N, t, k, spec.name, est.thermal_variance(ens, k)))
    return rows


def group_rows(cfg: ExperimentConfig, ensembles, N: int, t: float):
    rows = []
    for spec in cfg.estimators:
        p = spec.params
        if spec.name == "quenched_variance":
            for k in _k_list(p):
                mean, var = est.quenched_mean_and_variance(ensembles, k)
                rows.append(_row(cfg, N, t, k, "quenched_mean", mean))
                rows.append(_row(cfg, N, t, k, "quenched_variance", var))
        elif spec.name == "decorrelation":
            width = int(p.get("k_sites", 2))
            tuples = est.disjoint_site_tuples(N, width)[: int(p.get("max_tuples", 64))]
            tags = p.get("h", ["identity"])
            for tag in tags if isinstance(tags, list) else [tags]:
                mode = p.get("mode", "thermal")
                e = est.decorrelation_statistic(ensembles, tag, tuples, mode)
                rows.append(_row(cfg, N, t, None, f"decorrelation_{mode}_{tag}_k{width}", e))
        elif spec.name == "energy_concentration":
            e = est.energy_concentration_statistic(ensembles, _index(p))
            rows.append(_row(cfg, N, t, None, "energy_concentration", e))
        elif spec.name == "fds":
            e = est.fds_statistic(ensembles, _index(p), p.get("f", "one"), int(p.get("n", 1)),
                                  int(p.get("depth", 6)))
            rows.append(_row(cfg, N, t, None, f"fds_{p.get('f', 'one')}_n{p.get('n', 1)}", e))
        elif spec.name == "free_entropy_variance":
            systems = [(e_.model, e_.disorder) for e_ in ensembles]
            e = est.free_entropy_variance(systems, cfg.schedule.eps_N(N), p.get("V"))
            rows.append(_row(cfg, N, t, None, "free_entropy_variance", e))
    return rows


def gap_rows(cfg: ExperimentConfig, by_t: dict, N: int):
    rows = []
    t_hi = max(cfg.t_values)
    for spec in cfg.estimators:
        if spec.name != "mean_gap" or t_hi == 0.0:
            continue
        for k in _k_list(spec.params):
            e = est.mean_gap_perturbed_vs_unperturbed(by_t[t_hi], by_t[0.0], k)
            rows.append(_row(cfg, N, t_hi, k, "mean_gap", e))
    return rows


# --------------------------------------------------------------------------
# public API


@dataclass
class RunResult:
    out_dir: Path
    rows: list
    skipped_cells: int = 0
    gate: "GateReport | None" = None


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=est.CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int | None = None,
                   rhat_threshold: float = 1.05, gate: bool | None = None) -> RunResult:
    """Sample every missing cell, then assemble ``results.csv`` in canonical order."""
    out = Path(out_dir or cfg.output)
    threads = int(threads or os.environ.get(THREADS_ENV, 1) or 1)
    if threads < 1:
        raise ValueError("threads must be positive")
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write_bytes(out / "config.json", cfg.to_json().encode())

    report = None
    if (cfg.oracle_gate if gate is None else gate) and cfg.estimators and oracle_eligible(cfg):
        report = oracle_gate(cfg)
        if not report.passed:
            raise DiagnosticFailure("oracle gate failed: " + "; ".join(report.failures()))

    # rows and samples are only needed when there is something to evaluate
    if not cfg.estimators:
        text = _csv_text([])
        _atomic_write_bytes(out / "results.csv", text.encode())
        return RunResult(out, [], 0, report)

    todo, skipped = [], 0
    for N in cfg.N_grid:
        for t in cfg.t_values:
            missing = [d for d in range(cfg.n_disorder)
                       if not (out / "cells" / f"{cell_name(N, t, d)}.npz").exists()]
            skipped += cfg.n_disorder - len(missing)
            # chunk boundaries depend only on the disorder index
            chunks = {}
            for d in missing:
                chunks.setdefault(d // cfg.chunk_disorders, []).append(d)
            todo.extend((N, t, ds) for ds in chunks.values())
    cfg_json = cfg.to_json()
    if threads == 1 or len(todo) <= 1:
        for N, t, ds in todo:
            _run_chunk(cfg_json, N, t, ds, str(out), rhat_threshold)
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futs = [pool.submit(_run_chunk, cfg_json, N, t, ds, str(out), rhat_threshold)
                    for N, t, ds in todo]
            for f in futs:
                f.result()

    rows = []
    for N in cfg.N_grid:
        by_t = {}
        for t in cfg.t_values:
            ensembles = _load_ensembles(cfg, out, N, t)
            for ens in ensembles:
                rows.extend(cell_rows(cfg, ens, N, t))
            if cfg.n_disorder >= 2:
                rows.extend(group_rows(cfg, ensembles, N, t))
            by_t[t] = ensembles
        rows.extend(gap_rows(cfg, by_t, N))
        del by_t
    _atomic_write_bytes(out / "results.csv", _csv_text(rows).encode())
    return RunResult(out, rows, skipped, report)


# --------------------------------------------------------------------------
# oracle gate


@dataclass
class GateCheck:
    name: str
    value: float
    tolerance: float
    passed: bool
    message: str = ""


@dataclass
class GateReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def failures(self):
        return [f"{c.name}: {c.message or f'{c.value:.3g} > {c.tolerance:.3g}'}"
                for c in self.checks if not c.passed]

    def lines(self):
        return [f"{'PASS' if c.passed else 'FAIL'} {c.name}: value={c.value:.4g} "
                f"tolerance={c.tolerance:.4g} {c.message}".rstrip() for c in self.checks]


def oracle_eligible(cfg: ExperimentConfig) -> bool:
    return cfg.model == "random_field"


GATE_Z = 5.0


def oracle_gate(cfg: ExperimentConfig | None = None, systems=None, mcmc=None, eps: float | None = None,
                n_replicas: int = 4000, max_sites: int = 8) -> GateReport:
    """Sampler-vs-oracle moment comparisons plus the exact FdS identity at N = 2.

    Moment checks use a 5-standard-error tolerance so that a correct sampler
    fails with negligible probability.  ``mcmc`` may be a dict of McmcConfig
    fields (a broken configuration is reported as a failed named check).
    """
    report = GateReport()
    if systems is None:
        if cfg is None:
            raise ValueError("need a config or explicit systems")
        N = min(cfg.N_grid)
        systems = [build_system(cfg, N, max(cfg.t_values), 0)]
        eps = cfg.schedule.eps_N(N) if eps is None else eps
    eps = 1.0 if eps is None else eps
    if mcmc is None:
        mcmc = cfg.mcmc if cfg is not None else McmcConfig()
    if isinstance(mcmc, dict):
        try:
            mcmc = McmcConfig(**mcmc)
        except ValueError as exc:
            report.checks.append(GateCheck("sampler_config", math.nan, 0.0, False, str(exc)))
            return report
    for j, (model, disorder) in enumerate(systems):
        if not model.separable:
            continue
        try:
            ens = sample_ensembles([(model, disorder)], eps, n_replicas, mcmc, [("gate", j)])[0]
        except SamplerError as exc:
            report.checks.append(GateCheck(f"sampler_run[{j}]", math.nan, 0.0, False, str(exc)))
            continue
        sites = np.arange(min(max_sites, model.N))
        exact = separable_site_moments(model, disorder, eps, [1, 2, 4], sites)
        for c, p in enumerate((1, 2, 4)):
            vals = ens.samples[:, sites] ** p
            se = vals.std(axis=0, ddof=1) / math.sqrt(n_replicas)
            z = np.abs(vals.mean(axis=0) - exact[:, c]) / np.maximum(se, 1e-12)
            report.checks.append(GateCheck(f"moment_sigma^{p}[system {j}]", float(z.max()), GATE_Z,
                                           bool(z.max() <= GATE_Z), "max |z| over sites"))
    model, disorder = make_disorder("random_field", 2, {}, ("gate", "fds"), 0.0, 0.0)
    worst = 0.0
    for I in ((0,), (0, 1)):
        for f, n in (("one", 1), ("s11", 1), ("s11s21", 2)):
            _, _, gap = est.fds_identity_check(model, disorder, 0.5, PerturbationIndex(I), f, n,
                                               s_N=1.0, lam=0.75)
            worst = max(worst, abs(gap))
    report.checks.append(GateCheck("fds_identity_N2", worst, 1e-6, worst <= 1e-6))
    return report
