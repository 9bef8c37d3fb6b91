import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from multioverlap.models import (
    MODEL_FAMILIES,
    DisorderSample,
    QuadraticHamiltonian,
    as_spin_configuration,
    make_disorder,
    planted_overlap,
    planted_ridge_from_data,
    planted_ridge_model,
    quadratic_model,
    random_field_model,
    replay_disorder,
    total_energy,
    total_gradient,
    total_hessian_bound,
)
from multioverlap.perturbation import empty_perturbation


def systems(N=5, s=3.0, t=1.0):
    return [make_disorder(f, N, {}, ("models", f), s, t) for f in MODEL_FAMILIES]


def fd_gradient(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def fd_hessian(fn, x, h=1e-4):
    n = x.size
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h
            ej[j] = h
            H[i, j] = (fn(x + ei + ej) - fn(x + ei - ej) - fn(x - ei + ej) + fn(x - ei - ej)) / (4 * h * h)
    return H


# --- spin configurations -------------------------------------------------------

def test_spin_configuration_validation():
    assert as_spin_configuration([0.5, -1]).shape == (2,)
    for bad in ([1.2], [np.nan], 0.3):
        with pytest.raises(ValueError):
            as_spin_configuration(bad)


# --- random field -----------------------------------------------------------------

def test_random_field_examples():
    N = 4
    m = QuadraticHamiltonian("random_field", np.ones(N))
    assert m.energy(np.ones(N)) == N
    sigma = np.random.default_rng(0).uniform(-1, 1, N)
    assert np.array_equal(m.gradient(sigma), np.ones(N))
    model, dis = random_field_model(6, 1.0, rng=1)
    assert model.separable and model.hessian_upper_eigenvalue_bound == 0.0
    perm = np.random.default_rng(2).permutation(6)
    s = np.random.default_rng(3).uniform(-1, 1, 6)
    assert model.permuted(perm).energy(s[perm]) == pytest.approx(model.energy(s), abs=1e-14)


def test_random_field_rejects_bad_std():
    with pytest.raises(ValueError):
        random_field_model(3, 0.0)


# --- quadratic -------------------------------------------------------------------

def test_quadratic_examples():
    model, dis = quadratic_model(6, rng=4)
    A = model.quad
    h = dis.J["h"]
    assert model.energy(np.zeros(6)) == 0
    assert np.allclose(model.gradient(np.zeros(6)), h)
    s = np.random.default_rng(5).uniform(-1, 1, 6)
    assert np.allclose(model.gradient(s), -A @ s + h)
    v = np.random.default_rng(6).standard_normal((100, 6))
    assert np.all(np.einsum("ki,ij,kj->k", v, -A, v) <= 1e-12)
    assert model.hessian_upper_eigenvalue_bound == pytest.approx(-np.linalg.eigvalsh(A)[0])
    assert model.hessian_upper_eigenvalue_bound <= 0
    with pytest.raises(ValueError):
        quadratic_model(3, coupling_scale=0.0)


# --- planted ridge ---------------------------------------------------------------------

def test_planted_examples():
    rng = np.random.default_rng(7)
    N, M = 5, 8
    X = rng.normal(0, 1 / np.sqrt(N), (M, N))
    star = rng.uniform(-1, 1, N)
    model = planted_ridge_from_data(X, X @ star, 0.5)
    assert model.energy(star) == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(model.gradient(star), 0.0, atol=1e-12)
    others = rng.uniform(-1, 1, (50, N))
    assert np.all(model.energy(others) <= 1e-12)
    m, dis = planted_ridge_model(N, M, 1.0, rng=8)
    assert dis.sigma_star is not None
    assert planted_overlap(dis.sigma_star, dis.sigma_star) == pytest.approx(np.mean(dis.sigma_star ** 2))
    assert planted_overlap(dis.sigma_star, dis.sigma_star) <= 1
    y = dis.J["y"]
    assert m.energy(np.zeros(N)) == pytest.approx(-(y @ y) / 2)
    with pytest.raises(ValueError):
        planted_ridge_from_data(X, np.zeros(M + 1), 1.0)


def test_planted_overlap_examples():
    assert planted_overlap(np.ones(3), np.ones(3)) == 1
    star = np.array([0.5, -1.0, 0.2])
    assert planted_overlap(-star, star) == pytest.approx(-np.sum(star ** 2) / 3)
    assert planted_overlap([1, -1], [1, 1]) == 0
    with pytest.raises(ValueError):
        planted_overlap([1, 2, 3], [1, 2])


def test_sigma_star_only_for_planted():
    with pytest.raises(ValueError):
        DisorderSample("random_field", {}, {}, empty_perturbation(2), np.zeros(2))
    with pytest.raises(ValueError):
        DisorderSample("planted_ridge", {}, {}, empty_perturbation(2))


# --- invariants across models --------------------------------------------------------------

@pytest.mark.parametrize("family", MODEL_FAMILIES)
def test_gradient_matches_finite_differences(family):
    model, dis = make_disorder(family, 5, {}, ("grad", family), 3.0, 1.0)
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = rng.uniform(-0.9, 0.9, 5)
        g = total_gradient(model, dis, x, 0.3)
        fd = fd_gradient(lambda s: total_energy(model, dis, s, 0.3), x)
        assert np.max(np.abs(g - fd)) <= 1e-5 * max(1.0, np.max(np.abs(g)))


@pytest.mark.parametrize("family", MODEL_FAMILIES)
def test_concavity_with_certified_bound(family):
    model, dis = make_disorder(family, 4, {}, ("hess", family), 2.0, 1.0)
    eps = 0.2
    bound = total_hessian_bound(model, eps)
    assert bound <= -eps
    rng = np.random.default_rng(12)
    for _ in range(20):
        x = rng.uniform(-0.9, 0.9, 4)
        H = fd_hessian(lambda s: total_energy(model, dis, s, eps), x)
        v = rng.standard_normal(4)
        assert v @ H @ v <= bound * (v @ v) + 1e-5 * (v @ v)


@pytest.mark.parametrize("family", MODEL_FAMILIES)
def test_concavity_many_pairs(family):
    # second differences of the energy along 1000 random lines
    model, dis = make_disorder(family, 6, {}, ("conc", family), 3.0, 1.0)
    rng = np.random.default_rng(13)
    x = rng.uniform(-0.8, 0.8, (1000, 6))
    v = rng.standard_normal((1000, 6))
    v *= 0.1 / np.linalg.norm(v, axis=1, keepdims=True)
    e = lambda s: total_energy(model, dis, s, 0.0)
    second = e(x + v) - 2 * e(x) + e(x - v)
    assert np.all(second <= 1e-12)


@pytest.mark.parametrize("family", MODEL_FAMILIES)
def test_exchangeability_permutation(family):
    model, dis = make_disorder(family, 7, {}, ("perm", family))
    rng = np.random.default_rng(14)
    perm = rng.permutation(7)
    s = rng.uniform(-1, 1, 7)
    assert model.permuted(perm).energy(s[perm]) == pytest.approx(model.energy(s), rel=1e-12, abs=1e-12)


def test_total_energy_examples():
    model, dis = make_disorder("quadratic", 4, {}, ("te",), 2.0, 0.0)
    s = np.random.default_rng(15).uniform(-1, 1, 4)
    assert total_energy(model, dis, s, 0.0) == pytest.approx(model.energy(s))
    zero = QuadraticHamiltonian("random_field", np.zeros(5))
    d0 = DisorderSample("random_field", {}, {}, empty_perturbation(5))
    assert total_energy(zero, d0, np.ones(5), 0.2) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        total_energy(zero, d0, np.ones(4), 0.2)


@given(st.sampled_from(MODEL_FAMILIES), st.integers(0, 10 ** 6))
def test_make_disorder_reproducible_and_t_independent(family, seed):
    m1, d1 = make_disorder(family, 3, {}, (seed,), 2.0, 0.0)
    m2, d2 = make_disorder(family, 3, {}, (seed,), 2.0, 1.0)
    assert np.array_equal(m1.linear, m2.linear)
    assert np.array_equal(d1.perturbation.counts, d2.perturbation.counts)
    assert np.array_equal(d1.perturbation.lambdas, d2.perturbation.lambdas)
    assert d2.perturbation.t == 1.0


@pytest.mark.parametrize("family", MODEL_FAMILIES)
def test_record_replay(family):
    model, dis = make_disorder(family, 4, {}, ("replay", family), 2.0, 1.0)
    rec = json.loads(json.dumps(dis.to_record(include_arrays=True)))
    m2, d2 = replay_disorder(rec)
    assert np.array_equal(m2.linear, model.linear)
    assert np.array_equal(d2.perturbation.counts, dis.perturbation.counts)
    assert np.allclose(np.asarray(rec["J"][next(iter(dis.J))]), next(iter(dis.J.values())))


def test_unknown_family():
    with pytest.raises(ValueError):
        make_disorder("spin_glass", 3)
