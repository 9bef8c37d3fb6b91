import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from multioverlap.perturbation import (
    PerturbationIndex,
    PerturbationState,
    RegularizationSchedule,
    TruncationPolicy,
    empty_perturbation,
    enumerate_truncation,
    excluded_weight,
    gaussian_regularization_energy,
    iota,
    poisson_perturbation_energy,
    poisson_perturbation_gradient,
    poly_P,
    poly_P_prime,
    sample_perturbation,
    sample_u_indexed,
    u_indexed_energy,
)


@st.composite
def indices(draw, max_m=4, max_shift=6):
    m = draw(st.integers(1, max_m))
    return PerturbationIndex(tuple(p + draw(st.integers(0, max_shift)) for p in range(m)))


def single_state(I, counts, lam=1.0, t=1.0, s=1.0):
    counts = np.atleast_2d(np.asarray(counts, dtype=np.int64))
    return PerturbationState((I,), counts, [lam], s, t)


# --- PerturbationIndex and iota ---------------------------------------------

@pytest.mark.parametrize("exps, value", [((0,), 0), ((3, 1), 4), ((3, 2, 5), 10)])
def test_iota_examples(exps, value):
    assert iota(PerturbationIndex(exps)) == value


@pytest.mark.parametrize("exps", [(), (0, 0), (1, 2, 1)])
def test_invalid_indices_rejected(exps):
    with pytest.raises(ValueError):
        PerturbationIndex(exps)


# --- polynomial -------------------------------------------------------------

@pytest.mark.parametrize("x", [-1.0, -0.3, 0.0, 0.7, 1.0])
def test_poly_constant_index(x):
    assert poly_P(PerturbationIndex((1,)), x) == pytest.approx(1 / 16, abs=1e-15)


def test_poly_examples():
    I = PerturbationIndex((0, 1))
    assert poly_P(I, 1.0) == pytest.approx(1 / 16, abs=1e-15)
    assert poly_P(I, -1.0) == pytest.approx(1 / 32, abs=1e-15)
    assert poly_P(PerturbationIndex((0,)), -1.0) == pytest.approx(1 / 4, abs=1e-15)


@pytest.mark.parametrize("x", [-1.0001, 1.5, np.nan])
def test_poly_domain_error(x):
    with pytest.raises(ValueError):
        poly_P(PerturbationIndex((0,)), x)


def _poly_direct(I, x):
    a = [2.0 ** -e for e in I.exponents]
    return 2.0 ** (-sum(I.exponents) - 2 * I.m) * sum(a[p] * (x + 1) ** p for p in range(I.m))


@given(indices(), st.floats(-1, 1))
def test_poly_matches_definition_and_bounds(I, x):
    v = poly_P(I, x)
    assert v == pytest.approx(_poly_direct(I, x), rel=1e-13, abs=1e-300)
    assert 0 < v <= 0.25


@given(indices())
def test_poly_convex_nondecreasing(I):
    x = np.linspace(-1, 1, 201)
    y = poly_P(I, x)
    scale = y.max()
    assert np.all(np.diff(y) >= -1e-15 * scale)
    assert np.all(y[2:] - 2 * y[1:-1] + y[:-2] >= -1e-15 * scale)


@given(indices(), st.floats(-0.99, 0.99))
def test_poly_derivative_matches_finite_difference(I, x):
    h = 1e-6
    fd = (poly_P(I, x + h) - poly_P(I, x - h)) / (2 * h)
    assert poly_P_prime(I, x) == pytest.approx(fd, rel=1e-6, abs=1e-12)


# --- regularisation ----------------------------------------------------------

def test_gaussian_regularization_examples():
    assert gaussian_regularization_energy(np.zeros(3), 0.5) == 0
    assert gaussian_regularization_energy([1, 1], 0.1) == pytest.approx(-0.1)
    assert gaussian_regularization_energy([1, -1], 0.1) == pytest.approx(-0.1)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.floats(0, 1))
def test_gaussian_regularization_range(sigma, eps):
    v = gaussian_regularization_energy(sigma, eps)
    assert -0.5 * eps * len(sigma) - 1e-12 <= v <= 0


# --- truncation and tail bound ----------------------------------------------

def _shift_tuples(m, budget):
    if m == 0:
        yield ()
        return
    for j in range(budget + 1):
        for rest in _shift_tuples(m - 1, budget - j):
            yield (j,) + rest


def _brute_excluded(k_max, m_max, m_cap=7, iota_cap=32):
    total = 0.0
    for m in range(1, m_cap + 1):
        base = m * (m - 1) // 2
        for shifts in _shift_tuples(m, iota_cap - base):
            io = base + sum(shifts)
            if m > m_max or io > k_max:
                total += m * 2.0 ** (-io - 2 * m)
    return total


def test_truncation_contents():
    idx = enumerate_truncation(2, 2)
    assert set(I.exponents for I in idx) == {(0,), (1,), (2,), (0, 1), (1, 1), (0, 2)}
    assert len(TruncationPolicy().indices()) == len(set(TruncationPolicy().indices()))
    for I in TruncationPolicy().indices():
        assert iota(I) <= 8 and I.m <= 3


@pytest.mark.parametrize("k_max, m_max", [(0, 1), (2, 2), (4, 2), (8, 3)])
def test_tail_bound_matches_enumeration(k_max, m_max):
    # the enumeration is a partial sum (m <= 7, iota <= 32) of the same series
    brute = _brute_excluded(k_max, m_max)
    assert brute <= excluded_weight(k_max, m_max) <= brute + 1e-7


def test_tail_bound_decreases_with_k_max():
    vals = [TruncationPolicy(k, 3).tail_bound() for k in range(0, 12)]
    assert all(v >= 0 for v in vals)
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_negative_k_max_rejected():
    with pytest.raises(ValueError):
        TruncationPolicy(-1, 3)


# --- sampling -----------------------------------------------------------------

def test_sample_perturbation_zero_mean_gives_zero_energy(rng):
    st_ = sample_perturbation(5, 0.0, 1.0, None, rng)
    assert not st_.counts.any()
    assert poisson_perturbation_energy(rng.uniform(-1, 1, 5), st_) == 0


def test_sample_perturbation_counts_are_poisson(rng):
    pol = TruncationPolicy(0, 1)
    total = np.array([sample_perturbation(4, 4.0, 1.0, pol, rng).counts[0] for _ in range(20000)])
    # 80000 Poisson(1) draws
    assert abs(total.mean() - 1) < 3 / math.sqrt(total.size)
    assert abs(total.var() - 1) < 0.05


def test_sample_perturbation_lambdas_uniform(rng):
    lam = np.concatenate([sample_perturbation(2, 1.0, 1.0, None, rng).lambdas for _ in range(200)])
    assert lam.min() >= 0.5 and lam.max() <= 1.0
    assert stats.kstest((lam - 0.5) * 2, "uniform").pvalue > 1e-3


def test_sample_perturbation_reproducible():
    a = sample_perturbation(7, 3.0, 1.0, None, np.random.default_rng(5))
    b = sample_perturbation(7, 3.0, 1.0, None, np.random.default_rng(5))
    assert np.array_equal(a.counts, b.counts) and np.array_equal(a.lambdas, b.lambdas)
    assert a.tail_bound == TruncationPolicy().tail_bound()
    assert a.energy_tail_bound() == pytest.approx(3.0 * a.tail_bound)


@pytest.mark.parametrize("s", [5.0, -1.0])
def test_sample_perturbation_rejects_bad_mean(s, rng):
    with pytest.raises(ValueError):
        sample_perturbation(4, s, 1.0, None, rng)


def test_state_invariants():
    I = PerturbationIndex((0,))
    with pytest.raises(ValueError):
        single_state(I, [[1, 0]], lam=0.4)
    with pytest.raises(ValueError):
        single_state(I, [[1, 0]], t=1.5)
    with pytest.raises(ValueError):
        single_state(I, [[-1, 0]])
    with pytest.raises(ValueError):
        PerturbationState((I, I), np.zeros((2, 2), dtype=int), [1, 1], 1.0, 1.0)


# --- energy -------------------------------------------------------------------

def test_energy_examples():
    I = PerturbationIndex((0,))
    st_ = single_state(I, [[2, 0, 0]])
    sigma = np.array([1.0, 0.3, -0.2])
    assert poisson_perturbation_energy(sigma, st_) == pytest.approx(-2 * poly_P(I, 1.0))
    assert poisson_perturbation_energy(sigma, st_) == pytest.approx(-0.5)
    assert poisson_perturbation_energy(sigma, empty_perturbation(3)) == 0
    half = st_.with_strength(0.5)
    assert poisson_perturbation_energy(sigma, half) == pytest.approx(0.5 * poisson_perturbation_energy(sigma, st_))


def test_energy_dimension_mismatch():
    with pytest.raises(ValueError):
        poisson_perturbation_energy(np.zeros(2), empty_perturbation(3))


@given(st.integers(0, 2 ** 31), st.floats(0, 1), st.floats(0, 1))
def test_energy_nonpositive_and_monotone_in_t(seed, t1, t2):
    rng = np.random.default_rng(seed)
    state = sample_perturbation(6, 3.0, 1.0, None, rng)
    sigma = rng.uniform(-1, 1, 6)
    lo, hi = sorted((t1, t2))
    e_lo = poisson_perturbation_energy(sigma, state.with_strength(lo))
    e_hi = poisson_perturbation_energy(sigma, state.with_strength(hi))
    assert e_hi <= e_lo + 1e-15 <= 1e-15


def test_energy_matches_direct_sum(rng):
    state = sample_perturbation(5, 4.0, 0.7, TruncationPolicy(4, 3), rng)
    sigma = rng.uniform(-1, 1, 5)
    direct = 0.0
    for a, I in enumerate(state.truncation):
        direct += state.lambdas[a] * np.sum(state.counts[a] * poly_P(I, sigma))
    assert poisson_perturbation_energy(sigma, state) == pytest.approx(-0.7 * direct, rel=1e-12)


def test_gradient_matches_finite_difference(rng):
    state = sample_perturbation(4, 4.0, 1.0, None, rng)
    sigma = rng.uniform(-0.9, 0.9, 4)
    g = poisson_perturbation_gradient(sigma, state)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (poisson_perturbation_energy(sigma + e, state) - poisson_perturbation_energy(sigma - e, state)) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-10)


def test_site_and_u_indexed_forms_equal_in_distribution():
    I = PerturbationIndex((0, 1))
    N, s = 3, 2.0
    sigma = np.array([-0.5, 0.2, 0.9])
    rng = np.random.default_rng(99)
    site = rng.poisson(s / N, size=(100000, N)) @ poly_P(I, sigma)
    u = np.array([u_indexed_energy(sigma, I, sample_u_indexed(N, s, rng)) for _ in range(100000)])
    # equal sums computed in different orders differ in the last bit; round before comparing atoms
    site, u = np.round(site, 12), np.round(u, 12)
    n = m = 100000
    crit = 1.628 * math.sqrt((n + m) / (n * m))  # 1% two-sample KS critical value
    assert stats.ks_2samp(site, u).statistic < crit


# --- serialisation -----------------------------------------------------------

def test_record_round_trip_exact(rng):
    state = sample_perturbation(9, 3.0, 0.25, TruncationPolicy(5, 2), rng)
    rec = json.loads(json.dumps(state.to_record()))
    back = PerturbationState.from_record(rec)
    assert back.truncation == state.truncation
    assert np.array_equal(back.counts, state.counts)
    assert np.array_equal(back.lambdas, state.lambdas)
    assert (back.s_N, back.t, back.tail_bound, back.policy) == (state.s_N, state.t, state.tail_bound, state.policy)


# --- schedules ------------------------------------------------------------------

def test_default_schedule_values():
    sch = RegularizationSchedule()
    assert sch.s_N(16) == 4 and sch.s_N(17) == 5
    assert sch.eps_N(64) == pytest.approx((8 / 64) ** (1 / 3))
    sch.check([16, 64, 256, 1024])


@pytest.mark.parametrize("sched, grid", [
    (RegularizationSchedule(eps_rule="const:2"), [4, 8]),
    (RegularizationSchedule(eps_rule="power:1.5"), [4, 8]),
    (RegularizationSchedule(s_rule="const:10"), [4, 8]),
])
def test_schedule_check_rejects(sched, grid):
    with pytest.raises(ValueError):
        sched.check(grid)


def test_unknown_rule():
    with pytest.raises(ValueError):
        RegularizationSchedule(eps_rule="bogus").eps_N(4)
