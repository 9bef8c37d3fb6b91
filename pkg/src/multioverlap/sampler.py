"""Replica sampling from log-concave Gibbs measures on [-1, 1]^N.

Each replica is the final state of its own chain.  Chains for many disorder
samples and replicas are advanced together in numpy batches, but every
(chain, site) pair draws from its own counter-based stream, so the output of
a chain does not depend on what it was batched with.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import DisorderSample, QuadraticHamiltonian
from .rng import CounterRNG, derive_key, spawn_keys

ALGORITHMS = ("coordinate-slice", "reflected-langevin-metropolis")
_DEFAULT_STEP = {"coordinate-slice": 2.0, "reflected-langevin-metropolis": 0.3}
_MAX_SHRINK = 200


class SamplerError(RuntimeError):
    """A chain failed (non-finite energy, runaway shrinkage, or divergence)."""


@dataclass(frozen=True)
class McmcConfig:
    """Sampler settings.

    ``burn_in`` counts full coordinate sweeps for the slice sampler and
    whole-vector proposals for the Langevin sampler.  Traces of the first
    ``trace_sites`` coordinates are kept over the second half of burn-in
    (every ``thinning`` steps) for convergence diagnostics.
    """

    algorithm: str = "coordinate-slice"
    burn_in: int = 10
    thinning: int = 1
    step_size: float | None = None
    trace_sites: int = 4
    min_acceptance: float = 0.01

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.step_size is None:
            object.__setattr__(self, "step_size", _DEFAULT_STEP[self.algorithm])
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.burn_in < 1 or self.thinning < 1:
            raise ValueError("burn_in and thinning must be positive integers")
        if self.trace_sites < 0:
            raise ValueError("trace_sites must be non-negative")


@dataclass(frozen=True, eq=False)
class ReplicaEnsemble:
    """Conditionally i.i.d. replicas sharing one disorder sample."""

    model: QuadraticHamiltonian
    disorder: DisorderSample
    eps: float
    samples: np.ndarray
    acceptance: np.ndarray
    steps: int
    config: McmcConfig
    traces: np.ndarray | None = None
    lineage: tuple = ()
    block_size: int = 1

    @property
    def n_replicas(self) -> int:
        return self.samples.shape[0]

    @property
    def N(self) -> int:
        return self.samples.shape[1]

    def blocks(self, size: int | None = None) -> np.ndarray:
        """Disjoint consecutive replica groups, shape (n_blocks, size, N)."""
        size = self.block_size if size is None else size
        if size < 1:
            raise ValueError("block size must be positive")
        nb = self.n_replicas // size
        if nb < 1:
            raise ValueError(f"ensemble of {self.n_replicas} replicas has no block of size {size}")
        return self.samples[: nb * size].reshape(nb, size, self.N)

    def to_record(self) -> dict:
        return {
            "kind": "ReplicaEnsemble",
            "eps": float(self.eps),
            "steps": int(self.steps),
            "lineage": list(self.lineage),
            "block_size": self.block_size,
            "config": {k: getattr(self.config, k) for k in
                       ("algorithm", "burn_in", "thinning", "step_size", "trace_sites")},
            "disorder": self.disorder.to_record(),
            "samples": self.samples.tolist(),
            "acceptance": self.acceptance.tolist(),
        }


# --------------------------------------------------------------------------
# batched target


class _Batch:
    """Stacked energy data for D systems of equal size."""

    def __init__(self, systems, eps: float):
        models = [m for m, _ in systems]
        disorders = [d for _, d in systems]
        N = models[0].N
        if any(m.N != N or d.N != N for m, d in systems):
            raise ValueError("all systems in a batch must have the same N")
        self.N = N
        self.eps = float(eps)
        self.b = np.stack([m.linear for m in models])
        self.qdiag = np.stack([m.quad_diag for m in models])
        self.separable = all(m.separable for m in models)
        self.Q = None
        if not self.separable:
            self.Q = np.stack([m.quad if m.quad is not None else np.diag(m.quad_diag)
                               for m in models])
        P = max(d.perturbation.site_coefficients.shape[1] for d in disorders)
        self.pc = np.zeros((len(systems), N, P))
        for k, d in enumerate(disorders):
            c = d.perturbation.t * d.perturbation.site_coefficients
            self.pc[k, :, : c.shape[1]] = c
        if not (np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.pc))
                and np.all(np.isfinite(self.qdiag))):
            raise SamplerError("non-finite energy coefficients")

    def energy(self, X):
        q = np.sum(self.qdiag[:, None, :] * X * X, axis=-1) if self.Q is None else \
            np.einsum("drn,dnm,drm->dr", X, self.Q, X)
        pert = _horner(self.pc[:, None, :, :], X + 1.0).sum(axis=-1)
        return -0.5 * q + np.einsum("drn,dn->dr", X, self.b) - 0.5 * self.eps * np.sum(X * X, -1) - pert

    def gradient(self, X):
        QX = self.qdiag[:, None, :] * X if self.Q is None else X @ self.Q
        dpert = _horner_prime(self.pc[:, None, :, :], X + 1.0)
        return self.b[:, None, :] - QX - self.eps * X - dpert


def _horner(coef, y):
    out = np.zeros(np.broadcast_shapes(coef.shape[:-1], y.shape))
    for p in range(coef.shape[-1] - 1, -1, -1):
        out = out * y + coef[..., p]
    return out


def _horner_prime(coef, y):
    out = np.zeros(np.broadcast_shapes(coef.shape[:-1], y.shape))
    for p in range(coef.shape[-1] - 1, 0, -1):
        out = out * y + p * coef[..., p]
    return out


def _logf(x, alpha, lin, pc):
    """alpha x^2 + lin x - sum_p pc_p (x+1)^p."""
    y = np.zeros_like(x)
    xp1 = x + 1.0
    for p in range(pc.shape[-1] - 1, -1, -1):
        y = y * xp1 + pc[:, p]
    return (alpha * x + lin) * x - y


class _FlatStreams:
    def __init__(self, keys, counters):
        self.keys = np.ascontiguousarray(keys).ravel()
        self.counters = np.ascontiguousarray(counters).ravel().copy()

    def uniform(self, idx):
        from .rng import counter_uniform
        u = counter_uniform(self.keys[idx], self.counters[idx])
        self.counters[idx] += np.uint64(1)
        return u


def _slice_update(x0, alpha, lin, pc, streams: _FlatStreams, width: float):
    """One univariate slice-sampling update for every entry of x0 (flat arrays)."""
    C = x0.size
    everyone = np.arange(C)

    def f(x, idx):
        return _logf(x, alpha[idx], lin[idx], pc[idx])

    level = f(x0, everyone) + np.log(streams.uniform(everyone))
    if width >= 2.0:
        L = np.full(C, -1.0)
        R = np.full(C, 1.0)
    else:
        u = streams.uniform(everyone)
        L = np.maximum(x0 - width * u, -1.0)
        R = np.minimum(x0 - width * u + width, 1.0)
        for _ in range(int(math.ceil(2.0 / width)) + 1):
            cand = np.nonzero(L > -1.0)[0]
            grow = cand[f(L[cand], cand) > level[cand]]
            if grow.size == 0:
                break
            L[grow] = np.maximum(L[grow] - width, -1.0)
        for _ in range(int(math.ceil(2.0 / width)) + 1):
            cand = np.nonzero(R < 1.0)[0]
            grow = cand[f(R[cand], cand) > level[cand]]
            if grow.size == 0:
                break
            R[grow] = np.minimum(R[grow] + width, 1.0)
    x1 = x0.copy()
    active = everyone
    for _ in range(_MAX_SHRINK):
        prop = L[active] + streams.uniform(active) * (R[active] - L[active])
        ok = f(prop, active) >= level[active]
        x1[active[ok]] = prop[ok]
        rej = active[~ok]
        pr = prop[~ok]
        below = pr < x0[rej]
        L[rej[below]] = pr[below]
        R[rej[~below]] = pr[~below]
        active = rej
        if active.size == 0:
            assert np.all(np.abs(x1) <= 1.0), "slice proposal left the box"
            return x1
    raise SamplerError("slice shrinkage did not terminate")


def _slice_sweep(batch: _Batch, X, keys, counters, width):
    D, R, N = X.shape
    alpha = -0.5 * (batch.qdiag + batch.eps)  # (D, N)
    if batch.separable:
        a = np.broadcast_to(alpha[:, None, :], X.shape).ravel()
        lin = np.broadcast_to(batch.b[:, None, :], X.shape).ravel()
        pc = np.broadcast_to(batch.pc[:, None], (D, R, N, batch.pc.shape[-1])).reshape(-1, batch.pc.shape[-1])
        streams = _FlatStreams(keys, counters)
        X[...] = _slice_update(X.ravel(), a, lin, pc, streams, width).reshape(X.shape)
        counters[...] = streams.counters.reshape(counters.shape)
        return
    P = batch.pc.shape[-1]
    for i in range(N):
        # Q is symmetric, so the contiguous row serves as the column
        field_i = (X @ batch.Q[:, i, :, None])[..., 0] - batch.Q[:, i, i][:, None] * X[:, :, i]
        lin = (batch.b[:, i][:, None] - field_i).ravel()
        a = np.broadcast_to(alpha[:, i][:, None], (D, R)).ravel()
        pc = np.broadcast_to(batch.pc[:, i][:, None, :], (D, R, P)).reshape(-1, P)
        streams = _FlatStreams(keys[:, :, i], counters[:, :, i])
        X[:, :, i] = _slice_update(np.ascontiguousarray(X[:, :, i]).ravel(), a, lin, pc,
                                   streams, width).reshape(D, R)
        counters[:, :, i] = streams.counters.reshape(D, R)


def _reflect(y):
    z = np.mod(y + 1.0, 4.0)
    return np.where(z <= 2.0, z - 1.0, 3.0 - z)


def _log_reflected_density(y, mu, tau):
    """Log density of reflect(mu + tau * xi) at y, summed over coordinates."""
    ks = np.arange(-2, 3) * 4.0
    images = np.concatenate([y[..., None] + ks, (2.0 - y)[..., None] + ks], axis=-1)
    z = (images - mu[..., None]) / tau
    m = np.max(-0.5 * z * z, axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.sum(np.exp(-0.5 * z * z - m), axis=-1))
    return np.sum(lse - np.log(tau * math.sqrt(2 * math.pi)), axis=-1)


def _mala_step(batch: _Batch, X, HX, GX, rng: CounterRNG, tau):
    D, R, N = X.shape
    mu = X + 0.5 * tau * tau * GX
    xi = rng.normal().reshape(D, R, N)
    Y = _reflect(mu + tau * xi)
    HY = batch.energy(Y)
    GY = batch.gradient(Y)
    mu_y = Y + 0.5 * tau * tau * GY
    log_ratio = HY - HX + _log_reflected_density(X, mu_y, tau) - _log_reflected_density(Y, mu, tau)
    u = rng.uniform()[:: N].reshape(D, R)
    accept = np.log(u) < log_ratio
    X[accept] = Y[accept]
    HX[accept] = HY[accept]
    GX[accept] = GY[accept]
    return accept


# --------------------------------------------------------------------------
# public API


def _chain_keys(lineages, n_replicas):
    return np.array([[derive_key(*lin, "replica", r) for r in range(n_replicas)]
                     for lin in lineages], dtype=np.uint64)


def _run_batch(systems, eps, n_replicas, config: McmcConfig, lineages):
    batch = _Batch(systems, eps)
    D, N = len(systems), batch.N
    site_keys = spawn_keys(_chain_keys(lineages, n_replicas), N)  # (D, R, N)
    counters = np.zeros(site_keys.shape, dtype=np.uint64)
    init = _FlatStreams(site_keys, counters)
    X = (2.0 * init.uniform(np.arange(site_keys.size)) - 1.0).reshape(D, n_replicas, N)
    counters[...] = init.counters.reshape(counters.shape)

    S = min(config.trace_sites, N)
    record_from = config.burn_in // 2
    traces = []
    accepted = np.zeros((D, n_replicas))
    if config.algorithm == "coordinate-slice":
        for step in range(config.burn_in):
            _slice_sweep(batch, X, site_keys, counters, config.step_size)
            accepted += 1.0
            if step >= record_from and (step - record_from) % config.thinning == 0 and S:
                traces.append(X[..., :S].copy())
    else:
        rng = CounterRNG(site_keys.ravel())
        rng.counters = counters.ravel().copy()
        HX, GX = batch.energy(X), batch.gradient(X)
        if not np.all(np.isfinite(HX)):
            raise SamplerError("non-finite energy at the initial state")
        for step in range(config.burn_in):
            accepted += _mala_step(batch, X, HX, GX, rng, config.step_size)
            if step >= record_from and (step - record_from) % config.thinning == 0 and S:
                traces.append(X[..., :S].copy())
    acceptance = accepted / config.burn_in
    tr = np.stack(traces) if traces else None
    return X, acceptance, tr


def sample_ensembles(systems, eps: float, n_replicas: int, config: McmcConfig | None = None,
                     seeds=None, block_size: int = 1, chunk_floats: int = 2 ** 24):
    """Sample ``n_replicas`` independent replicas for each (model, disorder) pair.

    ``seeds`` gives one label tuple per system (defaults to each disorder's
    lineage).  Systems are processed in chunks bounded by ``chunk_floats``
    to limit the memory held by dense couplings.
    """
    config = config or McmcConfig()
    if n_replicas < 1:
        raise ValueError("n_replicas must be >= 1")
    systems = list(systems)
    if seeds is None:
        seeds = [d.lineage for _, d in systems]
    seeds = [tuple(s) if isinstance(s, (tuple, list)) else (s,) for s in seeds]
    if len(seeds) != len(systems):
        raise ValueError("one seed per system")
    out = []
    N = systems[0][0].N if systems else 0
    coupled = any(not m.separable for m, _ in systems)
    per_system = n_replicas * N * 6 + (N * N if coupled else 0)
    chunk = max(1, chunk_floats // max(per_system, 1))
    for start in range(0, len(systems), chunk):
        part = systems[start:start + chunk]
        X, acc, tr = _run_batch(part, eps, n_replicas, config, seeds[start:start + chunk])
        for k, (model, disorder) in enumerate(part):
            if np.any(acc[k] < config.min_acceptance):
                worst = int(np.argmin(acc[k]))
                raise SamplerError(
                    f"chain {seeds[start + k]}/replica {worst} diverged: acceptance "
                    f"{acc[k, worst]:.3g} < {config.min_acceptance}")
            out.append(ReplicaEnsemble(model, disorder, float(eps), X[k].copy(), acc[k].copy(),
                                       config.burn_in, config,
                                       None if tr is None else tr[:, k].copy(),
                                       seeds[start + k], block_size))
    return out


def sample_replicas(model, disorder, eps: float, n_replicas: int, config: McmcConfig | None = None,
                    seed=None, block_size: int = 1) -> ReplicaEnsemble:
    """Independent chains targeting exp(total energy) for one disorder sample."""
    seeds = None if seed is None else [seed]
    return sample_ensembles([(model, disorder)], eps, n_replicas, config, seeds, block_size)[0]


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class DiagnosticReport:
    rhat: np.ndarray
    ess: np.ndarray
    degenerate: bool
    failed: bool
    threshold: float = 1.05
    messages: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.failed or self.degenerate)


def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction; chains has shape (C, T, S)."""
    C, T, S = chains.shape
    half = T // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain")
    parts = np.concatenate([chains[:, :half], chains[:, half:2 * half]], axis=0)
    n = half
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(var_plus / W)


def effective_sample_size(chains: np.ndarray) -> np.ndarray:
    """Multi-chain ESS with Geyer's initial positive sequence truncation."""
    C, T, S = chains.shape
    x = chains - chains.mean(axis=1, keepdims=True)
    var = x.var(axis=1).mean(axis=0)
    ess = np.empty(S)
    for s in range(S):
        if var[s] == 0:
            ess[s] = np.nan
            continue
        acf = np.array([np.mean(np.sum(x[:, : T - k, s] * x[:, k:, s], axis=1) / T)
                        for k in range(T)]) / var[s]
        tau = -1.0
        for k in range(0, T - 1, 2):
            pair = acf[k] + acf[k + 1]
            if pair < 0:
                break
            tau += 2.0 * pair
        ess[s] = C * T / max(tau, 1e-12)
    return ess


def diagnostics(ensemble_or_traces, threshold: float = 1.05) -> DiagnosticReport:
    """Split R-hat and ESS per traced coordinate; flags R-hat > threshold."""
    traces = ensemble_or_traces.traces if isinstance(ensemble_or_traces, ReplicaEnsemble) \
        else np.asarray(ensemble_or_traces, dtype=float)
    if traces is None:
        raise ValueError("ensemble carries no traces")
    if traces.ndim == 2:
        traces = traces[..., None]
    if traces.ndim != 3:
        raise ValueError("raw traces must have shape (chains, draws, sites)")
    if isinstance(ensemble_or_traces, ReplicaEnsemble):
        traces = np.swapaxes(traces, 0, 1)  # stored as (T, C, S)
    C, T, S = traces.shape
    if C < 2:
        raise ValueError("diagnostics need at least 2 chains")
    if T < 4:
        raise ValueError("diagnostics need at least 4 draws per chain")
    rhat = split_rhat(traces)
    ess = effective_sample_size(traces)
    degenerate = bool(np.any(~np.isfinite(rhat)))
    failed = bool(np.any(rhat[np.isfinite(rhat)] > threshold))
    msgs = []
    if degenerate:
        msgs.append("zero within-chain variance: R-hat undefined")
    if failed:
        worst = int(np.nanargmax(np.where(np.isfinite(rhat), rhat, -np.inf)))
        msgs.append(f"R-hat {rhat[worst]:.4f} > {threshold} at traced site {worst}")
    return DiagnosticReport(rhat, ess, degenerate, failed, threshold, msgs)
