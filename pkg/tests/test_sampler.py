import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from multioverlap.models import DisorderSample, QuadraticHamiltonian, make_disorder, total_energy
from multioverlap.oracle import ProductTerm, grid_gibbs_expectation, log_partition_1d, separable_site_moments, site_potentials
from multioverlap.perturbation import empty_perturbation
from multioverlap.rng import CounterRNG, derive_key
from multioverlap.sampler import (
    McmcConfig,
    SamplerError,
    _Batch,
    _mala_step,
    diagnostics,
    sample_ensembles,
    sample_replicas,
    split_rhat,
)

MALA = "reflected-langevin-metropolis"


def field_system(h, eps_state=None):
    h = np.atleast_1d(np.asarray(h, dtype=float))
    return QuadraticHamiltonian("random_field", h), DisorderSample("random_field", {}, {}, empty_perturbation(h.size))


def z(samples, exact):
    return abs(samples.mean() - exact) / (samples.std(ddof=1) / math.sqrt(samples.size))


# --- config -----------------------------------------------------------------------

def test_config_validation():
    assert McmcConfig().step_size == 2.0
    assert McmcConfig(algorithm=MALA).step_size == 0.3
    for kw in ({"step_size": 0.0}, {"burn_in": 0}, {"thinning": 0}, {"algorithm": "gibbs"}):
        with pytest.raises(ValueError):
            McmcConfig(**kw)


# --- correctness against closed forms and the oracle ---------------------------------

@pytest.mark.parametrize("algorithm", ["coordinate-slice", MALA])
def test_uniform_target(algorithm):
    model, dis = field_system(np.zeros(2))
    ens = sample_replicas(model, dis, 0.0, 10000, McmcConfig(algorithm=algorithm, burn_in=20), ("uniform",))
    s = ens.samples[:, 0]
    assert z(s, 0.0) < 3
    assert z(s ** 2, 1 / 3) < 3


@pytest.mark.parametrize("algorithm", ["coordinate-slice", MALA])
def test_single_field_langevin_function(algorithm):
    model, dis = field_system([1.0])
    ens = sample_replicas(model, dis, 0.0, 20000, McmcConfig(algorithm=algorithm, burn_in=30), ("h1",))
    assert z(ens.samples[:, 0], 1 / math.tanh(1) - 1) < 3


def _oracle_cdf(model, dis, eps, i):
    pot = site_potentials(model, dis, eps, [i])
    x = np.linspace(-1, 1, 20001)
    w = np.exp(pot(x)[0] - pot(x)[0].max())
    c = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(x))])
    c /= c[-1]
    return lambda v: np.interp(v, x, c)


def test_separable_marginals_ks():
    model, dis = make_disorder("random_field", 6, {}, ("ks",), 2.0, 1.0)
    n = 4000
    ens = sample_replicas(model, dis, 0.5, n, McmcConfig(burn_in=30), ("ks",))
    crit = 1.628 / math.sqrt(n)
    for i in range(6):
        assert stats.kstest(ens.samples[:, i], _oracle_cdf(model, dis, 0.5, i)).statistic < crit


@pytest.mark.parametrize("algorithm", ["coordinate-slice", MALA])
def test_coupled_against_grid_oracle(algorithm):
    model, dis = make_disorder("quadratic", 2, {"coupling_scale": 2.0}, ("grid",), 1.0, 1.0)
    ens = sample_replicas(model, dis, 0.3, 20000, McmcConfig(algorithm=algorithm, burn_in=40), ("grid", algorithm))
    obs = {
        "s0": lambda m: m[:, 0],
        "s0s1": lambda m: m[:, 0] * m[:, 1],
        "s1sq": lambda m: m[:, 1] ** 2,
    }
    for name, f in obs.items():
        exact = grid_gibbs_expectation(model, dis, 0.3, [ProductTerm(1.0, (f,))])
        assert z(f(ens.samples), exact) < 3, name


def test_samplers_agree_on_quadratic():
    model, dis = make_disorder("quadratic", 8, {}, ("xcheck",), 3.0, 1.0)
    a = sample_replicas(model, dis, 0.4, 8000, McmcConfig(burn_in=40), ("x", 1)).samples
    b = sample_replicas(model, dis, 0.4, 8000, McmcConfig(algorithm=MALA, burn_in=200), ("x", 2)).samples
    for i in range(8):
        se = math.sqrt(a[:, i].var() / len(a) + b[:, i].var() / len(b))
        assert abs(a[:, i].mean() - b[:, i].mean()) < 3.5 * se


# --- detailed balance ----------------------------------------------------------------

def _exact_draws(h, eps, n, rng):
    out = np.empty(0)
    logmax = abs(h)
    while out.size < n:
        x = rng.uniform(-1, 1, 4 * n)
        keep = np.log(rng.uniform(size=x.size)) < h * x - 0.5 * eps * x * x - logmax
        out = np.concatenate([out, x[keep]])
    return out[:n]


def test_metropolis_detailed_balance():
    h, eps, n = 1.5, 0.5, 200000
    model, dis = field_system([h])
    batch = _Batch([(model, dis)], eps)
    X = _exact_draws(h, eps, n, np.random.default_rng(3)).reshape(1, n, 1)
    X0 = X.copy()
    rng = CounterRNG(np.array([derive_key("db", i) for i in range(n)], dtype=np.uint64))
    _mala_step(batch, X, batch.energy(X), batch.gradient(X), rng, 0.8)
    edges = np.array([-1.0, -0.3, 0.2, 0.6, 1.0])
    a = np.digitize(X0[0, :, 0], edges[1:-1])
    b = np.digitize(X[0, :, 0], edges[1:-1])
    F = np.zeros((4, 4))
    np.add.at(F, (a, b), 1.0)
    for i in range(4):
        for j in range(i + 1, 4):
            se = math.sqrt(F[i, j] + F[j, i]) + 1e-9
            assert abs(F[i, j] - F[j, i]) < 3.5 * se


# --- structural guarantees -------------------------------------------------------------

@settings(max_examples=15)
@given(st.sampled_from(["random_field", "quadratic", "planted_ridge"]), st.integers(0, 10 ** 6),
       st.floats(0.05, 2.0))
def test_slice_samples_stay_in_box(family, seed, width):
    model, dis = make_disorder(family, 3, {}, (seed,), 2.0, 1.0)
    ens = sample_replicas(model, dis, 0.1, 16, McmcConfig(burn_in=3, step_size=width), (seed,))
    assert np.all(np.abs(ens.samples) <= 1.0)


def test_reproducible_and_batch_independent():
    systems = [make_disorder("quadratic", 5, {}, ("rep", d), 2.0, 1.0) for d in range(3)]
    seeds = [("rep", d) for d in range(3)]
    a = sample_ensembles(systems, 0.3, 8, McmcConfig(burn_in=5), seeds)
    b = sample_ensembles(systems, 0.3, 8, McmcConfig(burn_in=5), seeds)
    alone = sample_replicas(*systems[1], 0.3, 8, McmcConfig(burn_in=5), seeds[1])
    tiny_chunks = sample_ensembles(systems, 0.3, 8, McmcConfig(burn_in=5), seeds, chunk_floats=1)
    for x, y, w in zip(a, b, tiny_chunks):
        assert np.array_equal(x.samples, y.samples)
        assert np.array_equal(x.samples, w.samples)
    assert np.array_equal(a[1].samples, alone.samples)


def test_replicas_are_distinct_streams():
    model, dis = field_system(np.zeros(3))
    ens = sample_replicas(model, dis, 0.0, 4, McmcConfig(burn_in=2), ("d",))
    assert len({tuple(r) for r in ens.samples}) == 4


def test_blocks_disjoint_equal_size():
    model, dis = field_system(np.zeros(3))
    ens = sample_replicas(model, dis, 0.0, 10, McmcConfig(burn_in=2), ("b",))
    blk = ens.blocks(3)
    assert blk.shape == (3, 3, 3)
    assert np.array_equal(blk.reshape(9, 3), ens.samples[:9])
    with pytest.raises(ValueError):
        ens.blocks(11)
    rec = ens.to_record()
    assert rec["lineage"] == ["b"] and len(rec["samples"]) == 10


def test_low_acceptance_reported_as_failure():
    model, dis = make_disorder("quadratic", 4, {"coupling_scale": 5.0}, ("acc",))
    with pytest.raises(SamplerError, match="replica"):
        sample_replicas(model, dis, 0.3, 8, McmcConfig(algorithm=MALA, burn_in=10, step_size=1.0,
                                                       min_acceptance=0.999), ("acc",))


def test_non_finite_energy_rejected():
    model = QuadraticHamiltonian("random_field", np.array([np.inf, 0.0]))
    dis = DisorderSample("random_field", {}, {}, empty_perturbation(2))
    with pytest.raises(SamplerError):
        sample_replicas(model, dis, 0.1, 4, McmcConfig(burn_in=2))
    with pytest.raises(ValueError):
        sample_replicas(model, dis, 0.1, 0)


# --- diagnostics ------------------------------------------------------------------------

def test_diagnostics_examples():
    const = np.ones((2, 20, 1))
    rep = diagnostics(const)
    assert rep.degenerate and not rep.ok
    rng = np.random.default_rng(0)
    iid = rng.uniform(size=(8, 2000, 3))
    rep = diagnostics(iid)
    assert np.all((rep.rhat >= 0.99) & (rep.rhat <= 1.05)) and rep.ok
    shifted = rng.uniform(size=(4, 500, 1))
    shifted[0] += 0.5
    rep = diagnostics(shifted)
    assert rep.failed and np.all(rep.rhat > 1.05)


def test_diagnostics_errors():
    with pytest.raises(ValueError):
        diagnostics(np.zeros((1, 10, 1)))
    with pytest.raises(ValueError):
        diagnostics(np.zeros((3, 2, 1)))
    with pytest.raises(ValueError):
        split_rhat(np.zeros((3, 3, 1)))


def test_diagnostics_on_ensemble_traces():
    model, dis = field_system(np.array([0.2, -0.1]))
    ens = sample_replicas(model, dis, 0.5, 64, McmcConfig(burn_in=200), ("diag",))
    assert ens.traces.shape == (100, 64, 2)
    rep = diagnostics(ens)
    assert rep.ok
    assert np.all(rep.ess > 1000)
