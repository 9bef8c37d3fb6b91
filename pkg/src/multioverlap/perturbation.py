"""Gaussian regularisation and the dyadic Poisson perturbation.

A perturbation index ``I`` is stored as its exponent tuple ``(i_0, ..., i_{m-1})``
with ``i_p >= p``; the dyadic reals ``a_p = 2**-i_p`` are only materialised when
a polynomial is evaluated.  The perturbation itself is kept in the
site-indexed form: one Poisson(s_N / N) count per (index, site) pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np


@dataclass(frozen=True, order=True)
class PerturbationIndex:
    exponents: tuple

    def __post_init__(self):
        exps = tuple(int(e) for e in self.exponents)
        if len(exps) < 1:
            raise ValueError("a perturbation index needs at least one exponent")
        for p, e in enumerate(exps):
            if e < p:
                raise ValueError(f"exponent i_{p}={e} must be >= {p}")
        object.__setattr__(self, "exponents", exps)

    @property
    def m(self) -> int:
        return len(self.exponents)

    @property
    def coefficients(self) -> tuple:
        """The dyadic coefficients a_p = 2**-i_p."""
        return tuple(2.0 ** -e for e in self.exponents)

    def __str__(self):
        return "(" + ",".join(str(e) for e in self.exponents) + ")"


def iota(index: PerturbationIndex) -> int:
    return sum(index.exponents)


def _check_box(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < -1.0) or np.any(x > 1.0) or np.any(~np.isfinite(x)):
        raise ValueError("polynomial argument outside [-1, 1]")
    return x


def poly_weights(index: PerturbationIndex) -> np.ndarray:
    """Coefficients of P_I in powers of (x + 1)."""
    scale = 2.0 ** (-iota(index) - 2 * index.m)
    return scale * np.array(index.coefficients)


def poly_P(index: PerturbationIndex, x):
    x = _check_box(x)
    w = poly_weights(index)
    y = np.zeros_like(x)
    for c in w[::-1]:
        y = y * (x + 1.0) + c
    return y if y.ndim else float(y)


def poly_P_prime(index: PerturbationIndex, x):
    x = _check_box(x)
    w = poly_weights(index)
    y = np.zeros_like(x)
    for p in range(len(w) - 1, 0, -1):
        y = y * (x + 1.0) + p * w[p]
    return y if y.ndim else float(y)


def gaussian_regularization_energy(sigma, eps: float):
    sigma = np.asarray(sigma, dtype=float)
    return -0.5 * eps * np.sum(sigma * sigma, axis=-1)


# --------------------------------------------------------------------------
# truncation of the countable index set


@dataclass(frozen=True)
class TruncationPolicy:
    """Keep every index with ``m <= m_max`` and ``iota <= k_max``."""

    k_max: int = 8
    m_max: int = 3

    def __post_init__(self):
        if self.k_max < 0:
            raise ValueError("k_max must be non-negative")
        if self.m_max < 1:
            raise ValueError("m_max must be >= 1")

    def indices(self) -> tuple:
        return enumerate_truncation(self.k_max, self.m_max)

    def tail_bound(self) -> float:
        """sum over excluded I of m * 2**(-iota(I) - 2m)."""
        return excluded_weight(self.k_max, self.m_max)


def enumerate_truncation(k_max: int, m_max: int) -> tuple:
    out = []
    for m in range(1, m_max + 1):
        base = m * (m - 1) // 2
        if base > k_max:
            break
        slack = k_max - base
        for shifts in product(range(slack + 1), repeat=m):
            if sum(shifts) <= slack:
                out.append(PerturbationIndex(tuple(p + j for p, j in enumerate(shifts))))
    return tuple(sorted(out, key=lambda I: (I.m, I.exponents)))


def _level_weight(m: int) -> float:
    # sum over all of I_m of m 2^{-iota-2m} = m 2^{-m} 2^{-m(m-1)/2}
    return m * 2.0 ** (-m - m * (m - 1) / 2)


def excluded_weight(k_max: int, m_max: int) -> float:
    total = 0.0
    m = m_max + 1
    while True:
        term = _level_weight(m)
        total += term
        if term < 1e-300 * max(total, 1e-300) or term == 0.0:
            break
        m += 1
    for m in range(1, m_max + 1):
        base = m * (m - 1) // 2
        # shifts J = sum_p (i_p - p) are counted by C(J+m-1, m-1); kept ones have J <= k_max - base
        kept = 0.0
        for J in range(0, k_max - base + 1):
            kept += math.comb(J + m - 1, m - 1) * 2.0 ** (-J)
        tail = 2.0 ** m - kept  # sum_J C(J+m-1, m-1) 2^{-J} = 2^m
        total += m * 2.0 ** (-2 * m) * 2.0 ** (-base) * max(tail, 0.0)
    return total


# --------------------------------------------------------------------------
# perturbation state


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PerturbationState:
    """Site-indexed Poisson perturbation.

    ``counts[a, i]`` is the Poisson count of index ``truncation[a]`` at site ``i``.
    """

    truncation: tuple
    counts: np.ndarray
    lambdas: np.ndarray
    s_N: float
    t: float
    tail_bound: float = 0.0
    policy: TruncationPolicy = field(default_factory=TruncationPolicy)

    def __post_init__(self):
        trunc = tuple(I if isinstance(I, PerturbationIndex) else PerturbationIndex(tuple(I))
                      for I in self.truncation)
        if len(set(trunc)) != len(trunc):
            raise ValueError("duplicate index in truncation")
        object.__setattr__(self, "truncation", trunc)
        counts = _frozen(self.counts, np.int64)
        lambdas = _frozen(self.lambdas, float)
        if counts.ndim != 2 or counts.shape[0] != len(trunc):
            raise ValueError("counts must have shape (len(truncation), N)")
        if lambdas.shape != (len(trunc),):
            raise ValueError("one lambda per retained index")
        if np.any(counts < 0):
            raise ValueError("negative Poisson count")
        if np.any(lambdas < 0.5) or np.any(lambdas > 1.0):
            raise ValueError("lambdas must lie in [1/2, 1]")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError("strength t must lie in [0, 1]")
        if self.s_N < 0:
            raise ValueError("s_N must be non-negative")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "lambdas", lambdas)

    @property
    def N(self) -> int:
        return self.counts.shape[1]

    @property
    def degree(self) -> int:
        return max((I.m for I in self.truncation), default=1) - 1

    def index_position(self, index: PerturbationIndex) -> int:
        try:
            return self.truncation.index(index)
        except ValueError:
            raise KeyError(f"index {index} is not retained in the truncation") from None

    def with_strength(self, t: float) -> "PerturbationState":
        return PerturbationState(self.truncation, self.counts, self.lambdas, self.s_N, t,
                                 self.tail_bound, self.policy)

    def with_lambdas(self, lambdas) -> "PerturbationState":
        return PerturbationState(self.truncation, self.counts, lambdas, self.s_N, self.t,
                                 self.tail_bound, self.policy)

    @cached_property
    def weight_matrix(self) -> np.ndarray:
        """W[a, p]: coefficient of (x+1)^p in P_{truncation[a]}."""
        W = np.zeros((len(self.truncation), self.degree + 1))
        for a, I in enumerate(self.truncation):
            W[a, : I.m] = poly_weights(I)
        return W

    @cached_property
    def site_coefficients(self) -> np.ndarray:
        """(N, degree+1) coefficients of sum_I lambda_I pi_{I,i} P_I in powers of (x+1).

        Does not include the strength t.
        """
        if not self.truncation:
            return np.zeros((self.N, 1))
        weighted = self.counts * self.lambdas[:, None]
        return weighted.T @ self.weight_matrix

    def site_energy(self, sigma):
        """sum_I lambda_I pi_{I,i} P_I(sigma_i) for every site, without t."""
        x = _check_box(sigma)
        c = self.site_coefficients
        y = np.zeros_like(x)
        for p in range(c.shape[1] - 1, -1, -1):
            y = y * (x + 1.0) + c[:, p]
        return y

    def site_gradient(self, sigma):
        x = _check_box(sigma)
        c = self.site_coefficients
        y = np.zeros_like(x)
        for p in range(c.shape[1] - 1, 0, -1):
            y = y * (x + 1.0) + p * c[:, p]
        return y

    def energy_tail_bound(self) -> float:
        """Analytic bound on the expected energy dropped by the truncation."""
        return self.t * self.s_N * self.tail_bound

    # serialisation ---------------------------------------------------------

    def to_record(self) -> dict:
        nz = np.nonzero(self.counts)
        return {
            "kind": "PerturbationState",
            "N": int(self.N),
            "s_N": float(self.s_N),
            "t": float(self.t),
            "k_max": self.policy.k_max,
            "m_max": self.policy.m_max,
            "tail_bound": float(self.tail_bound),
            "truncation": [list(I.exponents) for I in self.truncation],
            "lambdas": [float(v) for v in self.lambdas],
            "counts": [[int(a), int(i), int(self.counts[a, i])] for a, i in zip(*nz)],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PerturbationState":
        trunc = tuple(PerturbationIndex(tuple(e)) for e in rec["truncation"])
        counts = np.zeros((len(trunc), rec["N"]), dtype=np.int64)
        for a, i, c in rec["counts"]:
            counts[a, i] = c
        return cls(trunc, counts, np.array(rec["lambdas"], dtype=float), rec["s_N"], rec["t"],
                   rec["tail_bound"], TruncationPolicy(rec["k_max"], rec["m_max"]))


def empty_perturbation(N: int, policy: TruncationPolicy | None = None) -> PerturbationState:
    """No retained indices at all; contributes nothing to any energy."""
    policy = policy or TruncationPolicy()
    return PerturbationState((), np.zeros((0, N), dtype=np.int64), np.zeros(0), 0.0, 0.0,
                             0.0, policy)


def sample_perturbation(N: int, s_N: float, t: float, policy: TruncationPolicy | None,
                        rng: np.random.Generator) -> PerturbationState:
    """Draw pi_{I,i} ~ Poisson(s_N/N) and lambda_I ~ U[1/2, 1] for every retained I."""
    policy = policy or TruncationPolicy()
    if N < 1:
        raise ValueError("N must be positive")
    if s_N > N:
        raise ValueError(f"s_N={s_N} exceeds N={N}")
    if s_N < 0:
        raise ValueError("s_N must be non-negative")
    trunc = policy.indices()
    counts = rng.poisson(s_N / N, size=(len(trunc), N))
    lambdas = rng.uniform(0.5, 1.0, size=len(trunc))
    return PerturbationState(trunc, counts, lambdas, float(s_N), float(t), policy.tail_bound(),
                             policy)


def poisson_perturbation_energy(sigma, state: PerturbationState):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape[-1] != state.N:
        raise ValueError(f"configuration has {sigma.shape[-1]} sites, perturbation has {state.N}")
    if state.t == 0.0:
        return np.zeros(sigma.shape[:-1]) if sigma.ndim > 1 else 0.0
    return -state.t * np.sum(state.site_energy(sigma), axis=-1)


def poisson_perturbation_gradient(sigma, state: PerturbationState):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape[-1] != state.N:
        raise ValueError("dimension mismatch")
    return -state.t * state.site_gradient(sigma)


# U-indexed form, only used to check equality in distribution with the site-indexed one


def sample_u_indexed(N: int, s_N: float, rng: np.random.Generator) -> np.ndarray:
    """Sites U_1..U_pi with pi ~ Poisson(s_N), U_j uniform on [N]."""
    return rng.integers(0, N, size=rng.poisson(s_N))


def u_indexed_energy(sigma, index: PerturbationIndex, sites) -> float:
    sigma = np.asarray(sigma, dtype=float)
    if len(sites) == 0:
        return 0.0
    return float(np.sum(poly_P(index, sigma[np.asarray(sites)])))


# --------------------------------------------------------------------------
# schedules

_SCHEDULE_HELP = "rules: 'sqrt_ceil', 'cube_root_ratio', 'const:<v>', 'power:<a>'"


def _apply_rule(rule: str, N: int, s: float | None = None) -> float:
    if rule == "sqrt_ceil":
        return float(math.ceil(math.sqrt(N)))
    if rule == "cube_root_ratio":
        if s is None:
            raise ValueError("cube_root_ratio needs s_N")
        return (s / N) ** (1.0 / 3.0)
    kind, _, arg = rule.partition(":")
    if kind == "const":
        return float(arg)
    if kind == "power":
        return float(N) ** (-float(arg))
    raise ValueError(f"unknown schedule rule {rule!r}; {_SCHEDULE_HELP}")


@dataclass(frozen=True)
class RegularizationSchedule:
    """Per-N values of the ridge strength eps_N and the Poisson mean s_N."""

    eps_rule: str = "cube_root_ratio"
    s_rule: str = "sqrt_ceil"

    def s_N(self, N: int) -> float:
        return _apply_rule(self.s_rule, N)

    def eps_N(self, N: int) -> float:
        return _apply_rule(self.eps_rule, N, self.s_N(N))

    def check(self, grid) -> None:
        grid = list(grid)
        eps = [self.eps_N(N) for N in grid]
        s = [self.s_N(N) for N in grid]
        for N, e, sv in zip(grid, eps, s):
            if not 0.0 < e <= 1.0:
                raise ValueError(f"eps_N={e} at N={N} is outside (0, 1]")
            if not 0.0 < sv <= N:
                raise ValueError(f"s_N={sv} at N={N} is outside (0, N]")
        for a, b in zip(range(len(grid)), range(1, len(grid))):
            if eps[b] > eps[a] + 1e-15:
                raise ValueError("eps_N must be non-increasing on the grid")
            if grid[b] * eps[b] < grid[a] * eps[a] - 1e-12:
                raise ValueError("N * eps_N must be non-decreasing on the grid")
            if s[b] < s[a]:
                raise ValueError("s_N must be non-decreasing on the grid")
