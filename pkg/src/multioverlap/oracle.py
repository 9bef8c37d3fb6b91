"""Deterministic reference values: Gibbs moments, free entropies, Poisson averages.

Nothing here touches a random number generator; every Monte Carlo estimator in
the package is validated against these functions.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import gammaln

from .models import DisorderSample, QuadraticHamiltonian

GL_ORDER = 12


@lru_cache(maxsize=64)
def gauss_legendre_grid(panels: int, order: int = GL_ORDER, a: float = -1.0, b: float = 1.0):
    """Composite Gauss-Legendre nodes and weights on uniform panels of [a, b]."""
    t, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    x.setflags(write=False)
    wt.setflags(write=False)
    return x, wt


def _log_weights(logf: np.ndarray, wt: np.ndarray):
    if not np.all(np.isfinite(logf)):
        raise ValueError("potential is not finite on [-1, 1]")
    shift = np.max(logf, axis=-1, keepdims=True)
    return wt * np.exp(logf - shift), shift[..., 0]


def _moments_on_grid(potential, powers, panels):
    x, wt = gauss_legendre_grid(panels)
    logf = np.asarray(potential(x), dtype=float)
    w, shift = _log_weights(logf, wt)
    Z = w.sum(axis=-1)
    vals = np.stack([(w * x ** k).sum(axis=-1) / Z for k in powers], axis=-1)
    return vals, np.log(Z) + shift


def quadrature_moments_1d(potential: Callable, powers, resolution: int = 64, tol: float = 1e-10,
                          max_panels: int = 4096):
    """<x^k> under density ∝ exp(potential) on [-1, 1] for every k in ``powers``.

    ``potential`` may return shape (G,) or (S, G) for a batch of S potentials.
    Panels are doubled until two successive rules agree to ``tol``; that
    difference is returned as the error estimate.
    """
    if resolution < 64:
        raise ValueError("resolution must be at least 64 panels")
    powers = list(powers)
    panels = resolution
    coarse, _ = _moments_on_grid(potential, powers, panels // 2)
    while True:
        fine, _ = _moments_on_grid(potential, powers, panels)
        err = float(np.max(np.abs(fine - coarse)))
        if err <= tol or panels >= max_panels:
            return fine, err
        coarse = fine
        panels *= 2


def quadrature_moment_1d(potential: Callable, k: int, resolution: int = 64,
                         return_error: bool = False):
    vals, err = quadrature_moments_1d(potential, [k], resolution)
    value = float(vals[..., 0]) if vals.ndim == 1 else vals[..., 0]
    return (value, err) if return_error else value


def log_partition_1d(potential: Callable, resolution: int = 64, tol: float = 1e-12,
                     return_error: bool = False):
    """ln of the integral of exp(potential) over [-1, 1]."""
    panels = resolution
    _, coarse = _moments_on_grid(potential, [0], panels // 2)
    while True:
        _, fine = _moments_on_grid(potential, [0], panels)
        err = float(np.max(np.abs(fine - coarse)))
        if err <= tol or panels >= 4096:
            out = float(fine) if np.ndim(fine) == 0 else fine
            return (out, err) if return_error else out
        coarse = fine
        panels *= 2


# --------------------------------------------------------------------------
# separable models


def site_potentials(model: QuadraticHamiltonian, disorder: DisorderSample, eps: float,
                    sites=None, extra_linear=0.0):
    """Vectorised log-density of each single-site marginal (separable models only).

    Returns a function x -> (S, G) for the selected sites.
    """
    if not model.separable:
        raise ValueError("site potentials exist only for separable models")
    idx = np.arange(model.N) if sites is None else np.atleast_1d(sites)
    b = model.linear[idx] + extra_linear
    q = model.quad_diag[idx] + eps
    state = disorder.perturbation
    coef = state.t * state.site_coefficients[idx]

    def potential(x):
        x = np.asarray(x, dtype=float)
        y = np.zeros((idx.size, x.size))
        for p in range(coef.shape[1] - 1, -1, -1):
            y = y * (x + 1.0) + coef[:, p:p + 1]
        return b[:, None] * x - 0.5 * q[:, None] * x * x - y

    return potential


def separable_gibbs_moments(model, disorder, eps, site: int, powers):
    """Exact <sigma_site^k> for each k in ``powers`` (separable models)."""
    vals, _ = quadrature_moments_1d(site_potentials(model, disorder, eps, [site]), powers)
    return [float(v) for v in vals[0]]


def separable_site_moments(model, disorder, eps, powers, sites=None):
    """All-sites version: array of shape (S, len(powers))."""
    vals, _ = quadrature_moments_1d(site_potentials(model, disorder, eps, sites), powers)
    return vals


# --------------------------------------------------------------------------
# brute-force grids for small coupled systems


class ProductTerm(NamedTuple):
    """coef * prod_l f_l(sigma^l); each f_l maps (G, N) configurations to (G,)."""

    coef: float
    factors: tuple


def _box_grid(N, points_per_axis):
    panels = max(1, int(math.ceil(points_per_axis / GL_ORDER)))
    x, wt = gauss_legendre_grid(panels)
    if x.size < 41:
        raise ValueError("grid needs at least 41 points per axis")
    mesh = np.stack(np.meshgrid(*([x] * N), indexing="ij"), axis=-1).reshape(-1, N)
    wmesh = np.prod(np.stack(np.meshgrid(*([wt] * N), indexing="ij"), axis=-1).reshape(-1, N),
                    axis=1)
    return mesh, wmesh


def _gibbs_grid(model, disorder, eps, points_per_axis):
    from .models import total_energy
    mesh, wmesh = _box_grid(model.N, points_per_axis)
    H = total_energy(model, disorder, mesh, eps)
    w, shift = _log_weights(H, wmesh)
    Z = w.sum()
    return mesh, w / Z, float(np.log(Z) + shift)


def grid_gibbs_expectation(model, disorder, eps, observable, n_replicas: int = 1,
                           points_per_axis: int = 48, return_error: bool = False):
    """Tensor-product quadrature of a replicated Gibbs average for N <= 3.

    ``observable`` is either a list of ProductTerm (evaluated replica by
    replica, which is exact by conditional independence) or a callable on
    arrays of shape (G, n_replicas, N); the callable path builds the full
    n*N-dimensional grid and is limited to n*N <= 4.
    """
    N = model.N
    if N * n_replicas > 9 or N > 3:
        raise ValueError("grid oracle supports N <= 3 and N * n <= 9")

    def evaluate(points):
        mesh, p, _ = _gibbs_grid(model, disorder, eps, points)
        if callable(observable):
            if N * n_replicas > 4:
                raise ValueError("non-factorised observables need N * n <= 4")
            G = mesh.shape[0]
            idx = np.stack(np.meshgrid(*([np.arange(G)] * n_replicas), indexing="ij"),
                           axis=-1).reshape(-1, n_replicas)
            X = mesh[idx]
            weights = np.prod(p[idx], axis=1)
            return float(np.sum(weights * observable(X)))
        total = 0.0
        for term in observable:
            if len(term.factors) > n_replicas:
                raise ValueError("term uses more replicas than requested")
            val = term.coef
            for f in term.factors:
                val *= float(np.sum(p * f(mesh)))
            total += val
        return total

    fine = evaluate(points_per_axis)
    if not return_error:
        return fine
    coarse = evaluate(max(41, points_per_axis // 2 + 1))
    return fine, abs(fine - coarse)


def free_entropy(model, disorder, eps, points_per_axis: int = 96):
    """ln of the integral of exp(H') over the box."""
    if model.separable:
        pot = site_potentials(model, disorder, eps)
        return float(np.sum(log_partition_1d(pot))) + model.offset
    if model.N > 3:
        raise ValueError("free entropy of coupled models is only available for N <= 3")
    _, _, logZ = _gibbs_grid(model, disorder, eps, points_per_axis)
    return logZ


# --------------------------------------------------------------------------
# Poisson averages


class PoissonAverage(NamedTuple):
    value: float
    R: int
    tail_bound: float


def _poisson_upper_tail(s: float, a: int) -> float:
    """Chernoff bound on P(X >= a) for X ~ Poisson(s)."""
    if a <= 0:
        return 1.0
    if s == 0.0:
        return 0.0
    if a <= s:
        return 1.0
    return math.exp(-s + a * (1.0 + math.log(s / a)))


def poisson_tail_moment_bound(s: float, R: int, moment: int) -> float:
    """Bound on sum_{r > R} r^moment e^{-s} s^r / r!."""
    if moment == 0:
        return _poisson_upper_tail(s, R + 1)
    if moment == 1:
        return s * _poisson_upper_tail(s, R)
    if moment == 2:
        return s * s * _poisson_upper_tail(s, R - 1) + s * _poisson_upper_tail(s, R)
    raise ValueError("moment must be 0, 1 or 2")


def truncated_poisson_average(f: Callable[[int], float], s: float, bound: float = 1.0,
                              tol: float = 1e-12, moment: int = 0) -> PoissonAverage:
    """E f(X), X ~ Poisson(s), for |f(r)| <= bound * max(r, 1)^moment.

    The series is cut at the first R whose Chernoff tail bound times ``bound``
    is below ``tol``.
    """
    if s < 0:
        raise ValueError("Poisson mean must be non-negative")
    if tol <= 0 or bound < 0:
        raise ValueError("tol must be positive and bound non-negative")
    R = int(math.ceil(s))
    while bound * poisson_tail_moment_bound(s, R, moment) > tol:
        R += 1
    total = 0.0
    for r in range(R + 1):
        fr = f(r)
        if np.any(np.abs(fr) > bound * max(r, 1) ** moment * (1 + 1e-12) + 1e-300):
            raise ValueError(f"|f({r})| exceeds the stated bound")
        if s == 0.0:
            weight = 1.0 if r == 0 else 0.0
        else:
            weight = math.exp(-s + r * math.log(s) - gammaln(r + 1))
        total = total + weight * fr
    return PoissonAverage(total, R, bound * poisson_tail_moment_bound(s, R, moment))
