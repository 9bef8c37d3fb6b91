"""Multioverlaps and the Monte Carlo / exact statistics built on them.

Conventions: a *block* is an array ``(n, N)`` of n replicas; ensembles expose
disjoint blocks through ``ReplicaEnsemble.blocks``.  Products of thermal means
are always formed from disjoint replica blocks, and products of quenched means
from disjoint groups of disorder samples, so every estimator is unbiased for
the quantity it names (up to the stated truncations).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import comb, gammaln

from .oracle import gauss_legendre_grid, site_potentials, truncated_poisson_average
from .perturbation import PerturbationIndex, poly_P, poly_weights
from .sampler import ReplicaEnsemble

BOOTSTRAP_SEED = 20240531


@dataclass(frozen=True)
class MultioverlapIndex:
    powers: tuple

    def __post_init__(self):
        k = tuple(int(v) for v in self.powers)
        if not k or any(v < 1 for v in k):
            raise ValueError("multioverlap powers must be positive integers")
        object.__setattr__(self, "powers", k)

    @classmethod
    def parse(cls, text) -> "MultioverlapIndex":
        if isinstance(text, MultioverlapIndex):
            return text
        if isinstance(text, (tuple, list)):
            return cls(tuple(text))
        return cls(tuple(int(v) for v in str(text).split("-")))

    @property
    def n(self) -> int:
        return len(self.powers)

    @property
    def norm2(self) -> int:
        return sum(v * v for v in self.powers)

    def __str__(self):
        return "-".join(str(v) for v in self.powers)


@dataclass
class Estimate:
    value: float
    stderr: float
    n_disorder: int = 1
    n_blocks: int = 1
    mcmc_steps: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stderr >= 0 and not math.isnan(self.stderr):
            raise ValueError("standard error must be non-negative")

    @property
    def lower(self):
        return self.value - 3 * self.stderr

    @property
    def upper(self):
        return self.value + 3 * self.stderr


def _bootstrap_se(stat: Callable[[np.ndarray], float], n_units: int, n_boot: int = 200,
                  seed: int = BOOTSTRAP_SEED) -> float:
    if n_units < 2:
        return float("nan")
    rng = np.random.Generator(np.random.PCG64(seed))
    vals = np.array([stat(rng.integers(0, n_units, n_units)) for _ in range(n_boot)])
    return float(np.std(vals, ddof=1))


# --------------------------------------------------------------------------
# multioverlaps


def multioverlap(block, k) -> float:
    """R^(k) = N^-1 sum_i prod_l (sigma_i^l)^{k_l} over the first n replicas of ``block``.

    ``block`` may carry leading batch axes: shape (..., n', N) with n' >= n.
    """
    k = MultioverlapIndex.parse(k)
    block = np.asarray(block, dtype=float)
    if block.ndim < 2 or block.shape[-2] < k.n:
        raise ValueError(f"block needs at least {k.n} replicas")
    prod_ = np.ones(block.shape[:-2] + block.shape[-1:])
    for l, p in enumerate(k.powers):
        prod_ = prod_ * block[..., l, :] ** p
    out = prod_.mean(axis=-1)
    return float(out) if out.ndim == 0 else out


def multioverlap_gradient(block, k) -> np.ndarray:
    """Partial derivatives of R^(k) w.r.t. every sigma_i^l, shape (n, N)."""
    k = MultioverlapIndex.parse(k)
    block = np.asarray(block, dtype=float)[..., : k.n, :]
    N = block.shape[-1]
    grads = []
    for l, p in enumerate(k.powers):
        g = p * block[..., l, :] ** (p - 1) / N
        for m, q in enumerate(k.powers):
            if m != l:
                g = g * block[..., m, :] ** q
        grads.append(g)
    return np.stack(grads, axis=-2)


def block_multioverlaps(ensemble: ReplicaEnsemble, k) -> np.ndarray:
    k = MultioverlapIndex.parse(k)
    return multioverlap(ensemble.blocks(k.n), k)


def thermal_variance(ensemble: ReplicaEnsemble, k, n_boot: int = 200) -> Estimate:
    """<R^2> - <R R'> with R, R' from disjoint blocks; equals the ddof=1 variance over blocks."""
    k = MultioverlapIndex.parse(k)
    R = np.atleast_1d(block_multioverlaps(ensemble, k))
    B = R.size
    if B < 2:
        raise ValueError("thermal variance needs at least 2 disjoint blocks")

    def stat(idx):
        r = R[idx]
        return float(np.mean(r * r) - (np.sum(r) ** 2 - np.sum(r * r)) / (r.size * (r.size - 1)))

    value = stat(np.arange(B))
    return Estimate(value, _bootstrap_se(stat, B, n_boot), 1, B, ensemble.steps,
                    {"bound": k.norm2 / (ensemble.N * ensemble.eps) if ensemble.eps > 0 else math.inf})


def _u_product_of_means(x: np.ndarray, y: np.ndarray | None = None) -> float:
    """Unbiased estimate of E[x] E[y] from paired i.i.d. draws (distinct-pair U-statistic)."""
    y = x if y is None else y
    n = x.size
    return float((np.sum(x) * np.sum(y) - np.sum(x * y)) / (n * (n - 1)))


def quenched_mean_and_variance(ensembles, k, n_boot: int = 200):
    """(E<R>, E<(R - E<R>)^2>) over disorder samples.

    (E<R>)^2 is estimated from products over distinct disorder pairs (the
    average over all independent split-halves).
    """
    k = MultioverlapIndex.parse(k)
    ensembles = list(ensembles)
    D = len(ensembles)
    if D < 2:
        raise ValueError("need at least 2 disorder samples")
    per = [np.atleast_1d(block_multioverlaps(e, k)) for e in ensembles]
    m1 = np.array([r.mean() for r in per])
    m2 = np.array([np.mean(r * r) for r in per])
    nb = min(r.size for r in per)
    steps = ensembles[0].steps

    def mean_stat(idx):
        return float(np.mean(m1[idx]))

    def var_stat(idx):
        return float(np.mean(m2[idx]) - _u_product_of_means(m1[idx]))

    idx = np.arange(D)
    mean = Estimate(mean_stat(idx), _bootstrap_se(mean_stat, D, n_boot), D, nb, steps)
    var = Estimate(var_stat(idx), _bootstrap_se(var_stat, D, n_boot), D, nb, steps)
    return mean, var


# --------------------------------------------------------------------------
# decoupling


H_FAMILY = {
    "identity": lambda x: x,
    "square": lambda x: x * x,
    "affine": lambda x: 0.5 * (x + 1.0),
    "tanh2": lambda x: np.tanh(2.0 * x),
    "cube": lambda x: x ** 3,
    "quartic": lambda x: x ** 4,
}


def _h_functions(tags, k):
    if isinstance(tags, str):
        tags = (tags,) * k
    tags = tuple(tags)
    if len(tags) != k:
        raise ValueError("one h tag per site")
    try:
        return [H_FAMILY[t] for t in tags]
    except KeyError as exc:
        raise ValueError(f"unknown h tag {exc.args[0]!r}; choose from {sorted(H_FAMILY)}") from None


def _site_tuples(sites, N):
    sites = [tuple(int(i) for i in s) for s in sites] if sites and isinstance(sites[0], (tuple, list)) \
        else [tuple(int(i) for i in sites)]
    for s in sites:
        if len(set(s)) != len(s):
            raise ValueError("sites must be distinct")
        if any(not 0 <= i < N for i in s):
            raise ValueError("site index out of range")
    return sites


def disjoint_site_tuples(N: int, k: int) -> list:
    """(0..k-1), (k..2k-1), ...: all disjoint consecutive tuples."""
    return [tuple(range(j * k, (j + 1) * k)) for j in range(N // k)]


def _thermal_block_terms(samples, hs, sites):
    """Per block of k replicas: prod_j h_j(s^1_{i_j}) - prod_j h_j(s^j_{i_j}); shape (B, T)."""
    k = len(hs)
    B = samples.shape[0] // k
    blk = samples[: B * k].reshape(B, k, -1)
    out = np.empty((B, len(sites)))
    for t, s in enumerate(sites):
        same = np.ones(B)
        cross = np.ones(B)
        for j, (h, i) in enumerate(zip(hs, s)):
            same = same * h(blk[:, 0, i])
            cross = cross * h(blk[:, j, i])
        out[:, t] = same - cross
    return out


def decorrelation_statistic(ensembles, h_tags, sites, mode: str = "thermal",
                            n_boot: int = 200) -> Estimate:
    """Decoupling of bounded spin functions at distinct sites.

    thermal, one ensemble: <prod h_j(s_{i_j})> - prod <h_j(s_{i_j})> (signed).
    thermal, several ensembles: E over disorder of the squared thermal
    statistic, each square formed from two independent halves of the blocks.
    quenched: E<prod h_j(s_j)> - prod_j E<h_j(s_j)>, factor j of the product
    using the j-th of k disjoint groups of disorder samples.

    ``sites`` is one tuple or a list of tuples; results are averaged over tuples.
    """
    single = isinstance(ensembles, ReplicaEnsemble)
    ensembles = [ensembles] if single else list(ensembles)
    N = ensembles[0].N
    tuples = _site_tuples(sites, N)
    k = len(tuples[0])
    hs = _h_functions(h_tags, k)
    steps = ensembles[0].steps
    if mode == "thermal":
        terms = [_thermal_block_terms(e.samples, hs, tuples) for e in ensembles]
        B = terms[0].shape[0]
        if single:
            per_block = terms[0].mean(axis=1)
            se = float(per_block.std(ddof=1) / math.sqrt(B)) if B > 1 else float("nan")
            if k == 1:
                se = 0.0
            return Estimate(float(per_block.mean()), se, 1, B, steps)
        sq = []
        for tm in terms:
            half = tm.shape[0] // 2
            if half < 1:
                raise ValueError("need at least two blocks per ensemble")
            a = tm[:half].mean(axis=0)
            b = tm[half:2 * half].mean(axis=0)
            sq.append(np.mean(a * b))
        sq = np.array(sq)
        D = sq.size
        se = float(sq.std(ddof=1) / math.sqrt(D)) if D > 1 else float("nan")
        return Estimate(float(sq.mean()), se, D, B, steps, {"statistic": "mean_square"})
    if mode != "quenched":
        raise ValueError("mode must be 'thermal' or 'quenched'")
    D = len(ensembles)
    if k > 1 and D < k:
        raise ValueError(f"quenched mode needs at least {k} disorder samples")
    joint = np.array([np.mean([np.prod([h(e.samples[:, i]) for h, i in zip(hs, s)], axis=0).mean()
                               for s in tuples]) for e in ensembles])
    # marginal[d, j]: thermal mean of h_j at the j-th site, averaged over tuples
    marg = np.array([[np.mean([hs[j](e.samples[:, s[j]]).mean() for s in tuples])
                      for j in range(k)] for e in ensembles])

    def stat(idx):
        prod_ = 1.0
        for j in range(k):
            group = idx[j::k] if k > 1 else idx
            prod_ *= marg[group, j].mean()
        return float(joint[idx].mean() - prod_)

    idx = np.arange(D)
    return Estimate(stat(idx), 0.0 if k == 1 else _bootstrap_se(stat, D, n_boot), D,
                    ensembles[0].n_replicas, steps)


# --------------------------------------------------------------------------
# perturbation energies


def perturbation_energy_observable(sigma, state, index: PerturbationIndex):
    """E_I(sigma) = sum_i pi_{I,i} P_I(sigma_i)."""
    a = state.index_position(index)
    sigma = np.asarray(sigma, dtype=float)
    return np.sum(state.counts[a] * poly_P(index, sigma), axis=-1)


def energy_concentration_statistic(ensembles, index: PerturbationIndex, n_boot: int = 200) -> Estimate:
    """E_lambda E<|E_I - E<E_I>|> with E<E_I> estimated leaving the current disorder out."""
    ensembles = list(ensembles)
    D = len(ensembles)
    if D < 2:
        raise ValueError("need at least 2 disorder samples")
    E = [perturbation_energy_observable(e.samples, e.disorder.perturbation, index) for e in ensembles]
    means = np.array([v.mean() for v in E])
    s_N = ensembles[0].disorder.perturbation.s_N

    def stat(idx):
        m = means[idx]
        total = m.sum()
        vals = []
        for pos, d in enumerate(idx):
            loo = (total - m[pos]) / (len(idx) - 1)
            vals.append(np.mean(np.abs(E[d] - loo)))
        return float(np.mean(vals))

    thermal = []
    for v in E:
        R = v.size
        if R > 1:
            loo = (v.sum() - v) / (R - 1)
            thermal.append(np.mean(np.abs(v - loo)))
        else:
            thermal.append(0.0)
    idx = np.arange(D)
    return Estimate(stat(idx), _bootstrap_se(stat, D, n_boot), D, ensembles[0].n_replicas,
                    ensembles[0].steps,
                    {"thermal_part": float(np.mean(thermal)), "sqrt_2s": math.sqrt(2 * s_N),
                     "s_N": s_N})


# --------------------------------------------------------------------------
# Franz-de Sanctis machinery: exact oracle at N <= 4


F_CHOICES = {"one": 0, "s11": 1, "s11s21": 2}


class FdsComponents(NamedTuple):
    lhs: float        # E<f E_I(sigma^1)>
    rhs: float        # s E[<f theta e^{-lam sum theta}> / <e^{-lam theta}>^n]
    mean_f: float     # E<f>
    ratio_1: float    # E[<theta e^{-lam theta}> / <e^{-lam theta}>]


class _SiteTable:
    """Single-site thermal integrals for a separable base plus c copies of lam*P_I."""

    def __init__(self, model, disorder, eps, index, lam, panels=32):
        x, w = gauss_legendre_grid(panels)
        self.logbase = site_potentials(model, disorder, eps)(x)
        self.w = w
        self.x = x
        self.P = poly_P(index, x)
        self.lam = lam
        self.cache = {}

    def weights(self, i, c):
        key = (i, c)
        if key not in self.cache:
            logf = self.logbase[i] - self.lam * c * self.P
            f = self.w * np.exp(logf - logf.max())
            self.cache[key] = f / f.sum()
        return self.cache[key]

    def mean(self, i, c, g):
        return float(np.sum(self.weights(i, c) * g))


def _compositions(r, N):
    if N == 1:
        yield (r,)
        return
    for first in range(r + 1):
        for rest in _compositions(r - first, N - 1):
            yield (first,) + rest


def _multinomial_logw(c):
    r = sum(c)
    return gammaln(r + 1) - sum(gammaln(v + 1) for v in c) - r * math.log(len(c))


def _replica_factor(tab, counts, u, fsite, extra):
    """<g(sigma_0) * extra(sigma_u)> for one replica under the product measure."""
    x = tab.x
    ones = np.ones_like(x)
    g0 = x if fsite else ones
    if u == 0:
        return tab.mean(0, counts[0], g0 * extra)
    return tab.mean(0, counts[0], g0) * tab.mean(u, counts[u], extra)


def _fds_given_counts(tab, counts, f, n):
    """(<f E_I(sigma^1)>, E_u[<f theta e^{-lam sum theta}>/<e^{-lam theta}>^n], <f>, E_u[ratio_1])."""
    N = len(counts)
    x = tab.x
    P = tab.P
    lam = tab.lam
    eP = np.exp(-lam * P)
    f1 = f >= 1  # replica 1 carries sigma_0
    f2 = f == 2  # replica 2 carries sigma_0 as well
    mean_f = 1.0
    if f1:
        mean_f *= tab.mean(0, counts[0], x)
    if f2:
        mean_f *= tab.mean(0, counts[0], x)
    lhs = 0.0
    for i in range(N):
        if counts[i]:
            term = _replica_factor(tab, counts, i, f1, P)
            if f2:
                term *= tab.mean(0, counts[0], x)
            lhs += counts[i] * term
    rhs = 0.0
    r1 = 0.0
    for u in range(N):
        den = tab.mean(u, counts[u], eP)
        num = _replica_factor(tab, counts, u, f1, P * eP)
        for l in range(2, n + 1):
            num *= _replica_factor(tab, counts, u, f2 and l == 2, eP)
        rhs += num / den ** n
        r1 += tab.mean(u, counts[u], P * eP) / den
    return lhs, rhs / N, mean_f, r1 / N


def fds_oracle_components(model, disorder, eps, index: PerturbationIndex, f: str, n: int,
                          s_N: float, lam: float, tol: float = 1e-13) -> FdsComponents:
    """Exact Poisson/U averages of both sides of the cavity identity at fixed lambda.

    The index-I term is added in its U-indexed form on top of ``disorder``
    (whose own perturbation, if any, is part of the fixed base).
    """
    if not model.separable:
        raise ValueError("the FdS oracle needs a separable model")
    N = model.N
    if N > 4 or n > 2 or n < 1:
        raise ValueError("FdS oracle supports N <= 4 and n in {1, 2}")
    fcode = F_CHOICES[f]
    if fcode == 2 and n < 2:
        raise ValueError("f = s11s21 needs n = 2")
    tab = _SiteTable(model, disorder, eps, index, lam)
    Pmax = float(poly_P(index, 1.0))
    cache = {}

    def averaged(r):
        if r not in cache:
            acc = np.zeros(4)
            for c in _compositions(r, N):
                acc += math.exp(_multinomial_logw(c)) * np.array(_fds_given_counts(tab, c, fcode, n))
            cache[r] = acc
        return cache[r]

    bound_rhs = Pmax * math.exp(n * Pmax)
    lhs = truncated_poisson_average(lambda r: averaged(r)[0], s_N, Pmax, tol, moment=1).value
    rhs = s_N * truncated_poisson_average(lambda r: averaged(r)[1], s_N, bound_rhs, tol).value
    mean_f = truncated_poisson_average(lambda r: averaged(r)[2], s_N, 1.0, tol).value
    ratio = truncated_poisson_average(lambda r: averaged(r)[3], s_N, bound_rhs, tol).value
    return FdsComponents(float(lhs), float(rhs), float(mean_f), float(ratio))


def fds_identity_check(model, disorder, eps, index: PerturbationIndex, f: str = "one", n: int = 1,
                       s_N: float = 1.0, lam: float | None = None, lam_nodes: int = 8):
    """Both sides of E<f E_I> = s E[<f theta e^{-lam sum theta}>/<e^{-lam theta}>^n].

    With ``lam=None`` both sides are additionally averaged over lambda ~ U[1/2, 1]
    by Gauss-Legendre quadrature.  Returns (lhs, rhs, gap).
    """
    if lam is not None:
        comp = fds_oracle_components(model, disorder, eps, index, f, n, s_N, lam)
        return comp.lhs, comp.rhs, comp.lhs - comp.rhs
    t, w = np.polynomial.legendre.leggauss(lam_nodes)
    lams = 0.75 + 0.25 * t
    lhs = rhs = 0.0
    for lv, wv in zip(lams, w / 2.0):
        comp = fds_oracle_components(model, disorder, eps, index, f, n, s_N, float(lv))
        lhs += wv * comp.lhs
        rhs += wv * comp.rhs
    return float(lhs), float(rhs), float(lhs - rhs)


# --------------------------------------------------------------------------
# Franz-de Sanctis statistic by Monte Carlo


def _inverse_power_series_weights(n, depth):
    """1/W^n = sum_m C(m+n-1, n-1) (1-W)^m."""
    return np.array([comb(m + n - 1, n - 1, exact=True) for m in range(depth + 1)], dtype=float)


def _fds_disorder_terms(ens: ReplicaEnsemble, index, fcode, n, depth):
    """Per-disorder unbiased estimates of (Q1, <f>, Q2) via the replica expansion of 1/<e^{-lam theta}>^n."""
    state = ens.disorder.perturbation
    lam = float(state.lambdas[state.index_position(index)])
    theta = poly_P(index, ens.samples)  # (R, N): theta at every candidate site u
    e = np.exp(-lam * theta)
    one_minus = 1.0 - e
    coef_n = _inverse_power_series_weights(n, depth)
    coef_1 = _inverse_power_series_weights(1, depth)
    size = n + depth
    B = ens.n_replicas // size
    if B < 1:
        raise ValueError(f"need at least {size} replicas for depth {depth}")
    q1 = np.zeros(B)
    q2 = np.zeros(B)
    for b in range(B):
        rep = np.arange(b * size, (b + 1) * size)
        s0 = ens.samples[rep, 0]
        fval = 1.0
        if fcode >= 1:
            fval = s0[0]
        if fcode == 2:
            fval = fval * s0[1]
        num = fval * theta[rep[0]] * np.prod(e[rep[:n]], axis=0)  # over u
        # products of (1 - e) over the next m replicas
        tail = np.cumprod(np.vstack([np.ones(theta.shape[1]), one_minus[rep[n:]]]), axis=0)
        q1[b] = np.mean(num * (coef_n[:, None] * tail).sum(axis=0))
        tail1 = np.cumprod(np.vstack([np.ones(theta.shape[1]), one_minus[rep[1:1 + depth]]]), axis=0)
        q2[b] = np.mean(theta[rep[0]] * e[rep[0]] * (coef_1[:, None] * tail1).sum(axis=0))
    f_all = np.ones(ens.n_replicas)
    if fcode >= 1:
        f_all = ens.samples[:, 0].copy()
    if fcode == 2:
        half = ens.n_replicas // 2
        f_all = ens.samples[:half, 0] * ens.samples[half:2 * half, 0]
    wmin = math.exp(-lam * float(poly_P(index, 1.0)))
    tail_bound = sum(comb(m + n - 1, n - 1, exact=True) * (1 - wmin) ** m
                     for m in range(depth + 1, depth + 200))
    return q1.mean(), f_all.mean(), q2.mean(), lam, tail_bound


def fds_statistic(ensembles, index: PerturbationIndex, f: str = "one", n: int = 1, depth: int = 6,
                  n_boot: int = 200) -> Estimate:
    """E_lambda | E[Q1] - E<f> E[Q2] | with Q1, Q2 the two ratio terms of the FdS inequality.

    Disorder samples are grouped by lambda_I; within a group the product of the
    two disorder means uses disjoint halves.  ``extra['signed']`` holds the
    pooled signed gap, ``extra['expansion_tail']`` the worst relative
    truncation of the geometric replica expansion.
    """
    fcode = F_CHOICES[f]
    ensembles = list(ensembles)
    if len(ensembles) < 2:
        raise ValueError("need at least 2 disorder samples")
    rows = [_fds_disorder_terms(e, index, fcode, n, depth) for e in ensembles]
    q1 = np.array([r[0] for r in rows])
    fm = np.array([r[1] for r in rows])
    q2 = np.array([r[2] for r in rows])
    lam = np.array([r[3] for r in rows])
    groups = [np.nonzero(lam == v)[0] for v in np.unique(lam)]
    if any(g.size < 2 for g in groups):
        raise ValueError("each lambda group needs at least 2 disorder samples")

    def gap(idx):
        return float(q1[idx].mean() - _u_product_of_means(fm[idx], q2[idx]))

    def stat(sel):
        return float(np.mean([abs(gap(g[sel % g.size])) for g in groups]))

    D = len(ensembles)
    signed = gap(np.arange(D)) if len(groups) == 1 else float("nan")
    value = float(np.mean([abs(gap(g)) for g in groups]))
    return Estimate(value, _bootstrap_se(stat, D, n_boot), D,
                    ensembles[0].n_replicas // (n + depth), ensembles[0].steps,
                    {"signed": signed,
                     "signed_se": _bootstrap_se(lambda s: gap(s), D, n_boot) if len(groups) == 1 else float("nan"),
                     "expansion_tail": max(r[4] for r in rows), "n_lambda_groups": len(groups)})


# --------------------------------------------------------------------------
# free entropy variance


def _V_dictionary(s_N, N):
    """name -> (constant shift, linear coefficient on every spin); all bounded by s_N."""
    return {"zero": (0.0, 0.0), "const": (s_N, 0.0), "mag_plus": (0.0, s_N / N),
            "mag_minus": (0.0, -s_N / N)}


def free_entropy_values(systems, eps, V: str = "zero", s_N: float | None = None):
    from .oracle import free_entropy, log_partition_1d
    out = []
    for model, disorder in systems:
        sN = disorder.perturbation.s_N if s_N is None else s_N
        shift, lin = _V_dictionary(sN, model.N)[V]
        if lin == 0.0:
            F = free_entropy(model, disorder, eps)
        elif model.separable:
            F = float(np.sum(log_partition_1d(site_potentials(model, disorder, eps,
                                                              extra_linear=lin)))) + model.offset
        else:
            raise ValueError("linear V terms need a separable model")
        out.append(F + shift)
    return np.array(out)


def free_entropy_variance(systems, eps, V=None, mode: str = "v", s_N: float | None = None,
                          n_boot: int = 200) -> Estimate:
    """Disorder variance of ln Z^(V), maximised over a finite dictionary of V.

    mode='v': variance over all samples.  mode='v_prime': variance over J
    only, i.e. within groups sharing the same (pi, lambda), then the largest
    group average (a lower bound on the supremum over lambda).
    """
    systems = list(systems)
    if len(systems) < 2:
        raise ValueError("need at least 2 disorder samples")
    tags = list(_V_dictionary(1.0, 1)) if V is None else ([V] if isinstance(V, str) else list(V))
    per_V = {}
    for tag in tags:
        F = free_entropy_values(systems, eps, tag, s_N)
        if mode == "v":
            groups = [np.arange(len(F))]
        elif mode == "v_prime":
            keys = [d.perturbation.counts.tobytes() + d.perturbation.lambdas.tobytes() for _, d in systems]
            uniq = {k: i for i, k in enumerate(dict.fromkeys(keys))}
            lab = np.array([uniq[k] for k in keys])
            groups = [np.nonzero(lab == g)[0] for g in range(len(uniq))]
        else:
            raise ValueError("mode must be 'v' or 'v_prime'")

        def stat(idx, F=F, groups=groups):
            vals = []
            for g in groups:
                sel = g[idx % g.size] if idx is not None else g
                vals.append(np.var(F[sel], ddof=1) if sel.size > 1 else 0.0)
            return float(np.max(vals)) if mode == "v_prime" else float(vals[0])

        value = stat(None)
        per_V[tag] = (value, _bootstrap_se(lambda i: stat(i), len(F), n_boot))
    best = max(per_V, key=lambda t: per_V[t][0])
    return Estimate(per_V[best][0], per_V[best][1], len(systems), 1, 0,
                    {"argmax_V": best, "per_V": {t: v for t, (v, _) in per_V.items()},
                     "note": "maximum over a finite dictionary: a lower bound on the supremum"})


# --------------------------------------------------------------------------
# perturbed vs unperturbed


def _same_disorder(a: ReplicaEnsemble, b: ReplicaEnsemble) -> bool:
    if a.N != b.N or tuple(a.lineage) != tuple(b.lineage):
        return False
    if not np.array_equal(a.model.linear, b.model.linear):
        return False
    pa, pb = a.disorder.perturbation, b.disorder.perturbation
    return np.array_equal(pa.counts, pb.counts) and np.array_equal(pa.lambdas, pb.lambdas)


def exact_thermal_multioverlap(model, disorder, eps, k) -> float:
    """<R^(k)> for a separable model: N^-1 sum_i prod_l <sigma_i^{k_l}>."""
    from .oracle import separable_site_moments
    k = MultioverlapIndex.parse(k)
    powers = sorted(set(k.powers))
    mom = separable_site_moments(model, disorder, eps, powers)
    col = {p: j for j, p in enumerate(powers)}
    prod_ = np.ones(model.N)
    for p in k.powers:
        prod_ = prod_ * mom[:, col[p]]
    return float(prod_.mean())


def mean_gap_perturbed_vs_unperturbed(perturbed, unperturbed, k, n_boot: int = 200) -> Estimate:
    """E|<R>_{t=1} - <R>_{t=0}| from paired ensembles sharing disorder and chain seeds."""
    k = MultioverlapIndex.parse(k)
    perturbed, unperturbed = list(perturbed), list(unperturbed)
    if len(perturbed) != len(unperturbed) or not perturbed:
        raise ValueError("need one unperturbed ensemble per perturbed ensemble")
    for a, b in zip(perturbed, unperturbed):
        if not _same_disorder(a, b):
            raise ValueError("perturbed and unperturbed ensembles do not share their disorder")
    diffs = np.array([np.mean(block_multioverlaps(a, k)) - np.mean(block_multioverlaps(b, k))
                      for a, b in zip(perturbed, unperturbed)])
    D = diffs.size
    s_N = perturbed[0].disorder.perturbation.s_N
    N = perturbed[0].N

    def stat(idx):
        return float(np.mean(np.abs(diffs[idx])))

    return Estimate(stat(np.arange(D)), _bootstrap_se(stat, D, n_boot), D,
                    perturbed[0].n_replicas // k.n, perturbed[0].steps,
                    {"rate": (s_N / N) ** (1.0 / 6.0), "signed_mean": float(diffs.mean()),
                     "diffs": diffs})


# --------------------------------------------------------------------------
# Brascamp-Lieb


@dataclass(frozen=True)
class Observable:
    """g on n replicas with its gradient; both act on arrays (..., n, N)."""

    name: str
    n: int
    fn: Callable
    grad: Callable
    linear_weights: np.ndarray | None = None


def linear_observable(w) -> Observable:
    w = np.asarray(w, dtype=float)
    return Observable("linear", 1, lambda X: X[..., 0, :] @ w,
                      lambda X: np.broadcast_to(w, X.shape[:-2] + (1, w.size)), w)


def constant_observable(c: float = 1.0) -> Observable:
    return Observable("constant", 1, lambda X: np.full(X.shape[:-2], c),
                      lambda X: np.zeros(X.shape[:-2] + (1, X.shape[-1])))


def sine_observable(w) -> Observable:
    w = np.asarray(w, dtype=float)
    return Observable("sine", 1, lambda X: np.sin(X[..., 0, :] * w).sum(-1),
                      lambda X: (w * np.cos(X[..., 0, :] * w))[..., None, :])


def multioverlap_observable(k) -> Observable:
    k = MultioverlapIndex.parse(k)
    return Observable(f"R({k})", k.n, lambda X: multioverlap(X, k),
                      lambda X: multioverlap_gradient(X, k))


class BrascampLiebResult(NamedTuple):
    variance: float
    bound: float
    variance_se: float
    bound_se: float
    eps_certified: float

    @property
    def passed(self) -> bool:
        return self.variance <= self.bound + 3.0 * math.hypot(self.variance_se, self.bound_se)


def brascamp_lieb_check(model, disorder, eps, g: Observable, ensemble: ReplicaEnsemble | None = None,
                        n_replicas: int = 512, config=None, seed=("bl",)) -> BrascampLiebResult:
    """Var g <= E|grad g|^2 / eps_c with eps_c the certified curvature eps - hessian_bound."""
    eps_c = eps - model.hessian_upper_eigenvalue_bound
    if not eps_c > 0:
        raise ValueError("uncertified concavity: no strictly negative Hessian bound available")
    if model.separable and g.linear_weights is not None:
        from .oracle import separable_site_moments
        mom = separable_site_moments(model, disorder, eps, [1, 2])
        var = float(np.sum(g.linear_weights ** 2 * (mom[:, 1] - mom[:, 0] ** 2)))
        return BrascampLiebResult(var, float(g.linear_weights @ g.linear_weights) / eps_c, 0.0, 0.0, eps_c)
    if ensemble is None:
        from .sampler import sample_replicas
        ensemble = sample_replicas(model, disorder, eps, n_replicas * g.n, config, seed)
    X = ensemble.blocks(g.n)
    vals = np.asarray(g.fn(X), dtype=float)
    gn = np.sum(np.asarray(g.grad(X)) ** 2, axis=(-2, -1))
    B = vals.size
    var = float(np.var(vals, ddof=1))
    var_se = _bootstrap_se(lambda idx: float(np.var(vals[idx], ddof=1)), B)
    bound = float(gn.mean() / eps_c)
    bound_se = float(gn.std(ddof=1) / math.sqrt(B) / eps_c)
    return BrascampLiebResult(var, bound, var_se, bound_se, eps_c)


# --------------------------------------------------------------------------
# proof utilities


E_MINUS_2 = math.exp(-2.0)


def reciprocal_poly(x, r: int):
    """p_r(x) = sum_{m=0}^r (1-x)^m, an approximation of 1/x on [e^-2, 1)."""
    if r < 0:
        raise ValueError("r must be non-negative")
    x = np.asarray(x, dtype=float)
    if np.any(x < E_MINUS_2 - 1e-15) or np.any(x >= 1.0):
        raise ValueError("x must lie in [e^-2, 1)")
    q = 1.0 - x
    out = np.zeros_like(x)
    for _ in range(r + 1):
        out = out * q + 1.0
    return float(out) if out.ndim == 0 else out


def reciprocal_poly_error_bound(r: int) -> float:
    return math.e ** 2 * (1.0 - E_MINUS_2) ** (r + 1)


def _derivative(fn, x, h=None):
    h = 1e-5 * max(1.0, abs(x)) if h is None else h
    return (fn(x + h) - fn(x - h)) / (2 * h)


def _check_convex(fn, x, delta, name):
    grid = np.linspace(x - 2 * delta, x + 2 * delta, 17)
    vals = np.array([fn(u) for u in grid])
    second = vals[2:] - 2 * vals[1:-1] + vals[:-2]
    scale = max(1.0, float(np.max(np.abs(vals))))
    if np.any(second < -1e-9 * scale):
        raise ValueError(f"{name} is not convex around x={x}")


def convex_derivative_gap_bound(G, g, x: float, delta: float, dG=None, dg=None):
    """Both sides of |G'(x) - g'(x)| <= delta^-1 sum_u |G(u) - g(u)| + C+ + C-."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    _check_convex(G, x, delta, "G")
    _check_convex(g, x, delta, "g")
    dG = dG or (lambda u: _derivative(G, u))
    dg = dg or (lambda u: _derivative(g, u))
    lhs = abs(dG(x) - dg(x))
    c_plus = dg(x + delta) - dg(x)
    c_minus = dg(x) - dg(x - delta)
    rhs = sum(abs(G(u) - g(u)) for u in (x - delta, x, x + delta)) / delta + c_plus + c_minus
    return float(lhs), float(rhs)


# --------------------------------------------------------------------------
# CSV rows

CSV_COLUMNS = ("experiment_id", "model", "N", "eps", "s_N", "t", "k", "estimator", "value",
               "stderr", "n_disorder", "n_blocks", "seed")


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def estimate_row(experiment_id, model, N, eps, s_N, t, k, estimator, est: Estimate, seed) -> dict:
    row = {"experiment_id": experiment_id, "model": model, "N": int(N), "eps": float(eps),
           "s_N": float(s_N), "t": float(t), "k": str(k) if k is not None else "",
           "estimator": estimator, "value": float(est.value), "stderr": float(est.stderr),
           "n_disorder": int(est.n_disorder), "n_blocks": int(est.n_blocks), "seed": seed}
    return {c: _fmt(row[c]) for c in CSV_COLUMNS}
