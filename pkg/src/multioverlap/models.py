"""Concave random Hamiltonians on the box [-1, 1]^N.

All three shipped models are quadratic forms

    H(sigma) = -1/2 sigma^T Q sigma + b^T sigma + c,    Q positive semi-definite,

which is what makes their full conditionals cheap to evaluate in the sampler.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .perturbation import (
    PerturbationState,
    TruncationPolicy,
    empty_perturbation,
    gaussian_regularization_energy,
    poisson_perturbation_energy,
    poisson_perturbation_gradient,
    sample_perturbation,
)
from .rng import derive_seed_sequence


def as_spin_configuration(values) -> np.ndarray:
    """Validate a point (or a stack of points) of [-1, 1]^N."""
    sigma = np.asarray(values, dtype=float)
    if sigma.ndim == 0:
        raise ValueError("a spin configuration is a vector")
    if not np.all(np.isfinite(sigma)) or np.any(np.abs(sigma) > 1.0):
        raise ValueError("spins must lie in [-1, 1]")
    return sigma


def _generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    labels = rng if isinstance(rng, tuple) else (rng,)
    return np.random.Generator(np.random.Philox(derive_seed_sequence(*labels)))


@dataclass(frozen=True, eq=False)
class QuadraticHamiltonian:
    """H(sigma) = -1/2 sigma^T Q sigma + linear . sigma + offset.

    ``quad`` is None for separable models (Q = diag(quad_diag)).
    """

    name: str
    linear: np.ndarray
    quad: np.ndarray | None = None
    quad_diag: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=float)
        object.__setattr__(self, "linear", lin)
        if self.quad is not None:
            Q = np.asarray(self.quad, dtype=float)
            if Q.shape != (lin.size, lin.size):
                raise ValueError("quadratic form has the wrong shape")
            object.__setattr__(self, "quad", Q)
            object.__setattr__(self, "quad_diag", np.diag(Q).copy())
        elif self.quad_diag is None:
            object.__setattr__(self, "quad_diag", np.zeros(lin.size))
        else:
            object.__setattr__(self, "quad_diag", np.asarray(self.quad_diag, dtype=float))

    @property
    def N(self) -> int:
        return self.linear.size

    @property
    def separable(self) -> bool:
        return self.quad is None

    def _check(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape[-1] != self.N:
            raise ValueError(f"expected {self.N} spins, got {sigma.shape[-1]}")
        return sigma

    def energy(self, sigma):
        sigma = self._check(sigma)
        if self.quad is None:
            q = np.sum(self.quad_diag * sigma * sigma, axis=-1)
        else:
            q = np.einsum("...i,ij,...j->...", sigma, self.quad, sigma)
        return -0.5 * q + sigma @ self.linear + self.offset

    def gradient(self, sigma):
        sigma = self._check(sigma)
        if self.quad is None:
            return self.linear - self.quad_diag * sigma
        return self.linear - sigma @ self.quad

    def hessian(self, sigma=None) -> np.ndarray:
        if self.quad is None:
            return -np.diag(self.quad_diag)
        return -self.quad

    @cached_property
    def hessian_upper_eigenvalue_bound(self) -> float:
        """Certified upper bound on the Hessian spectrum (<= 0).

        Q is a Gram matrix (or diagonal with non-negative entries) in every
        shipped model, so its smallest eigenvalue is >= 0 exactly; the
        symmetric eigensolve only sharpens the bound.
        """
        if self.quad is None:
            lam = float(np.min(self.quad_diag)) if self.N else 0.0
        else:
            lam = float(np.linalg.eigvalsh(self.quad)[0])
        return -max(lam, 0.0)

    def permuted(self, perm) -> "QuadraticHamiltonian":
        perm = np.asarray(perm)
        quad = None if self.quad is None else self.quad[np.ix_(perm, perm)]
        return QuadraticHamiltonian(self.name, self.linear[perm], quad,
                                    None if quad is not None else self.quad_diag[perm], self.offset)


HamiltonianModel = QuadraticHamiltonian


@dataclass(frozen=True, eq=False)
class DisorderSample:
    """One realisation of the quenched randomness (J, pi, lambda) and the strength t."""

    model: str
    params: dict
    J: dict
    perturbation: PerturbationState
    sigma_star: np.ndarray | None = None
    lineage: tuple = ()

    def __post_init__(self):
        if (self.sigma_star is not None) != (self.model == "planted_ridge"):
            raise ValueError("sigma_star must be present exactly for planted models")

    @property
    def N(self) -> int:
        return self.perturbation.N

    def with_perturbation(self, state: PerturbationState) -> "DisorderSample":
        if state.N != self.N:
            raise ValueError("perturbation size does not match the disorder")
        return replace(self, perturbation=state)

    def with_strength(self, t: float) -> "DisorderSample":
        return replace(self, perturbation=self.perturbation.with_strength(t))

    def to_record(self, include_arrays: bool = False) -> dict:
        rec = {
            "kind": "DisorderSample",
            "model": self.model,
            "N": self.N,
            "params": dict(self.params),
            "lineage": list(self.lineage),
            "perturbation": self.perturbation.to_record(),
        }
        if include_arrays:
            rec["J"] = {k: np.asarray(v).tolist() for k, v in self.J.items()}
            if self.sigma_star is not None:
                rec["sigma_star"] = self.sigma_star.tolist()
        return rec


_BUILDERS = {}


def _register(name):
    def deco(fn):
        _BUILDERS[name] = fn
        return fn
    return deco


def _bare_disorder(name, N, params, J, sigma_star=None, lineage=()):
    return DisorderSample(name, params, J, empty_perturbation(N), sigma_star, tuple(lineage))


@_register("random_field")
def random_field_model(N: int, field_std: float = 1.0, rng=0):
    """H(sigma) = sum_i h_i sigma_i with h_i ~ N(0, field_std^2)."""
    if N < 1:
        raise ValueError("N must be positive")
    if field_std <= 0:
        raise ValueError("field_std must be positive")
    gen = _generator(rng)
    h = gen.normal(0.0, field_std, size=N)
    model = QuadraticHamiltonian("random_field", h)
    lineage = rng if isinstance(rng, tuple) else ((rng,) if isinstance(rng, int) else ())
    return model, _bare_disorder("random_field", N, {"field_std": field_std}, {"h": h},
                                 lineage=lineage)


@_register("quadratic")
def quadratic_model(N: int, M: int | None = None, coupling_scale: float = 0.5, rng=0):
    """H(sigma) = -1/2 sigma^T A sigma + h^T sigma with A = (c/M) G G^T."""
    if N < 1:
        raise ValueError("N must be positive")
    if coupling_scale <= 0:
        raise ValueError("coupling_scale must be positive")
    M = 2 * N if M is None else int(M)
    if M < 1:
        raise ValueError("M must be positive")
    gen = _generator(rng)
    G = gen.standard_normal((N, M))
    h = gen.standard_normal(N)
    A = (coupling_scale / M) * (G @ G.T)
    A = 0.5 * (A + A.T)
    model = QuadraticHamiltonian("quadratic", h, A)
    lineage = rng if isinstance(rng, tuple) else ((rng,) if isinstance(rng, int) else ())
    return model, _bare_disorder("quadratic", N, {"M": M, "coupling_scale": coupling_scale},
                                 {"G": G, "h": h}, lineage=lineage)


@_register("planted_ridge")
def planted_ridge_model(N: int, M: int | None = None, noise_std: float = 1.0, rng=0):
    """Least-squares posterior: H(sigma) = -|y - X sigma|^2 / (2 noise_std^2)."""
    if N < 1:
        raise ValueError("N must be positive")
    M = 2 * N if M is None else int(M)
    if M < 1:
        raise ValueError("M must be positive")
    if noise_std <= 0:
        raise ValueError("noise_std must be positive")
    gen = _generator(rng)
    sigma_star = gen.uniform(-1.0, 1.0, size=N)
    X = gen.normal(0.0, 1.0 / np.sqrt(N), size=(M, N))
    z = gen.standard_normal(M)
    y = X @ sigma_star + noise_std * z
    model = planted_ridge_from_data(X, y, noise_std)
    lineage = rng if isinstance(rng, tuple) else ((rng,) if isinstance(rng, int) else ())
    return model, _bare_disorder("planted_ridge", N, {"M": M, "noise_std": noise_std},
                                 {"X": X, "y": y}, sigma_star, lineage)


def planted_ridge_from_data(X, y, noise_std: float) -> QuadraticHamiltonian:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (M, N) and y of length M")
    s2 = noise_std ** 2
    Q = X.T @ X / s2
    return QuadraticHamiltonian("planted_ridge", X.T @ y / s2, 0.5 * (Q + Q.T),
                                offset=-float(y @ y) / (2 * s2))


MODEL_FAMILIES = tuple(_BUILDERS)


def make_disorder(family: str, N: int, params: dict | None = None, seed_labels: tuple = (0,),
                  s_N: float = 0.0, t: float = 0.0, policy: TruncationPolicy | None = None):
    """Build (model, disorder) with J and the perturbation drawn from separate streams.

    ``t`` does not enter the seed lineage, so the t = 0 and t = 1 systems share
    their randomness (common random numbers).
    """
    if family not in _BUILDERS:
        raise ValueError(f"unknown model family {family!r}; choose from {MODEL_FAMILIES}")
    params = dict(params or {})
    labels = tuple(seed_labels)
    model, disorder = _BUILDERS[family](N, rng=labels + ("J",), **params)
    pert = sample_perturbation(N, s_N, t, policy, _generator(labels + ("pi",)))
    return model, replace(disorder, perturbation=pert, lineage=labels)


def replay_disorder(record: dict):
    """Rebuild (model, disorder) from a record written by DisorderSample.to_record."""
    pr = record["perturbation"]
    return make_disorder(record["model"], record["N"], record["params"],
                         tuple(record["lineage"]), pr["s_N"], pr["t"],
                         TruncationPolicy(pr["k_max"], pr["m_max"]))


def total_energy(model: QuadraticHamiltonian, disorder: DisorderSample, sigma, eps: float):
    """Bare energy + ridge regularisation + Poisson perturbation."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape[-1] != disorder.N or model.N != disorder.N:
        raise ValueError("dimension mismatch between model, disorder and configuration")
    return (model.energy(sigma) + gaussian_regularization_energy(sigma, eps)
            + poisson_perturbation_energy(sigma, disorder.perturbation))


def total_gradient(model: QuadraticHamiltonian, disorder: DisorderSample, sigma, eps: float):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape[-1] != disorder.N or model.N != disorder.N:
        raise ValueError("dimension mismatch between model, disorder and configuration")
    return (model.gradient(sigma) - eps * sigma
            + poisson_perturbation_gradient(sigma, disorder.perturbation))


def total_hessian_bound(model: QuadraticHamiltonian, eps: float) -> float:
    """Upper bound on the Hessian of the full energy; the perturbation is concave."""
    return model.hessian_upper_eigenvalue_bound - eps


def planted_overlap(sigma, sigma_star):
    sigma = np.asarray(sigma, dtype=float)
    sigma_star = np.asarray(sigma_star, dtype=float)
    if sigma.shape[-1] != sigma_star.shape[-1]:
        raise ValueError("length mismatch")
    return np.mean(sigma * sigma_star, axis=-1)
