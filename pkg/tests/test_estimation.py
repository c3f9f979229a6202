import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bc3e.errors import DomainError, NewtonNonConvergence, ValidationError
from bc3e.estimation import (FitConfig, alpha_gradient, alpha_objective, fit, gamma_stat_terms, init_params,
                             m_step_alpha, m_step_beta, sufficient_stats)
from bc3e.inference import e_step
from bc3e.model import LabelTable, ProblemShape, VariationalState
from bc3e.special import digamma
from bc3e.synth import sample_dataset, standard_spec

from oracles import alpha_argmax_k2, dirichlet_objective


def _stats_for(alpha_star, votes, n):
    """gamma_stats for n instances whose gamma is alpha* plus fixed vote vectors."""
    terms = []
    for i in range(n):
        g = np.asarray(alpha_star) + np.asarray(votes[i % len(votes)], dtype=float)
        terms.append(digamma(g) - digamma(g.sum()))
    return np.sum(terms, axis=0)


def test_objective_vanishes_at_unit_alpha():
    assert alpha_objective([1.0, 1.0], [-3.0, 7.0], 13) == 0.0


def test_objective_matches_scipy_form(rng):
    for _ in range(20):
        a = rng.uniform(0.05, 20.0, 4)
        s = rng.uniform(-50.0, -1.0, 4)
        assert alpha_objective(a, s, 17) == pytest.approx(dirichlet_objective(a, s, 17), rel=1e-12, abs=1e-9)


def test_objective_domain():
    with pytest.raises(DomainError):
        alpha_objective([1.0, 0.0], [0.0, 0.0], 1)
    with pytest.raises(DomainError):
        alpha_gradient([-1.0, 1.0], [0.0, 0.0], 1)


def test_gradient_matches_central_differences(rng):
    h = 1e-5
    for _ in range(100):
        k = int(rng.integers(2, 6))
        a = rng.uniform(0.2, 10.0, k)
        s = _stats_for(rng.uniform(0.2, 5.0, k), [rng.integers(0, 4, k)], 25)
        g = alpha_gradient(a, s, 25)
        fd = np.array([(alpha_objective(a + h * e, s, 25) - alpha_objective(a - h * e, s, 25)) / (2 * h)
                       for e in np.eye(k)])
        assert np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1.0) < 1e-5


def test_objective_concave_on_random_segments(rng):
    for _ in range(1000):
        k = int(rng.integers(2, 5))
        a, b = rng.uniform(0.01, 20.0, (2, k))
        s = rng.uniform(-80.0, -0.5, k)
        n = int(rng.integers(1, 40))
        mid = alpha_objective((a + b) / 2, s, n)
        chord = (alpha_objective(a, s, n) + alpha_objective(b, s, n)) / 2
        assert mid >= chord - 1e-9 * max(1.0, abs(chord))


@pytest.mark.parametrize("alpha_star,votes", [
    ([0.7, 1.9], [[2, 0], [0, 1], [1, 1]]),
    ([3.0, 0.4], [[1, 0], [0, 0]]),
    ([1.2, 1.2], [[3, 0], [0, 3]]),
])
def test_newton_matches_grid_golden_oracle(alpha_star, votes):
    n = 60
    s = _stats_for(alpha_star, votes, n)
    res = m_step_alpha(np.ones(2), s, n)
    ref = alpha_argmax_k2(s, n)
    assert res.converged
    assert np.max(np.abs(res.alpha - ref) / ref) <= 1e-3
    assert alpha_objective(res.alpha, s, n) >= dirichlet_objective(ref, s, n) - 1e-9


def test_symmetric_stats_give_symmetric_alpha():
    s = np.full(4, -7.5)
    res = m_step_alpha(np.array([0.3, 1.0, 2.0, 5.0]), s, 5)
    assert np.max(res.alpha) - np.min(res.alpha) <= 1e-10 * np.max(res.alpha)


def test_iterates_leave_the_floor():
    cfg = FitConfig(alpha_floor=1e-10)
    s = _stats_for([2.0, 0.5], [[1, 0], [0, 1]], 40)
    start = np.array([cfg.alpha_floor, 1.0])
    assert alpha_gradient(start, s, 40)[0] > 0
    path = []
    res = m_step_alpha(start, s, 40, cfg, callback=path.append)
    assert res.alpha[0] > 1e-3
    assert np.all(res.alpha >= cfg.alpha_floor)
    assert np.max(np.abs(res.alpha - alpha_argmax_k2(s, 40)) / res.alpha) <= 1e-3
    for a in path:
        assert np.all(a >= cfg.alpha_floor)


def test_gradient_checked_at_every_newton_iterate(rng):
    s = _stats_for([0.4, 2.5, 1.0], [[2, 1, 0], [0, 0, 3]], 30)
    h = 1e-5
    iterates = []
    m_step_alpha(np.array([5.0, 5.0, 5.0]), s, 30, callback=iterates.append)
    assert iterates
    for a in iterates:
        g = alpha_gradient(a, s, 30)
        fd = np.array([(alpha_objective(a + h * e, s, 30) - alpha_objective(a - h * e, s, 30)) / (2 * h)
                       for e in np.eye(3)])
        assert np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1.0) < 1e-5


def test_newton_warns_when_capped():
    s = _stats_for([0.4, 2.5], [[2, 1]], 30)
    with pytest.warns(NewtonNonConvergence):
        res = m_step_alpha(np.array([50.0, 50.0]), s, 30, FitConfig(newton_max_iters=1))
    assert not res.converged


def test_m_step_beta_examples():
    state = VariationalState(np.ones((2, 2)), np.array([[[1.0, 0.0]], [[1.0, 0.0]]]))
    table = LabelTable([[0], [0]], [[0], [1]])
    beta = m_step_beta(state, table, 1e-300, [2])[0]
    assert np.allclose(beta[0], [0.5, 0.5], atol=1e-15)
    assert np.allclose(beta[1], [0.5, 0.5], atol=1e-15)
    uniform = VariationalState(np.ones((4, 3)), np.full((4, 1, 3), 1 / 3))
    beta = m_step_beta(uniform, LabelTable(np.zeros((4, 0), int), [[0], [1], [0], [1]]), 1e-10, [2])[0]
    assert np.allclose(beta, 0.5, atol=1e-15)


def test_beta_rows_positive_and_normalized(seed42):
    spec, sample = seed42
    params = init_params(spec.shape, 0)
    state, _ = e_step(params, sample.table)
    for b in m_step_beta(state, sample.table, 1e-10, spec.shape.clusters_per_clustering):
        assert np.all(b > 0)
        assert np.max(np.abs(b.sum(axis=1) - 1.0)) <= 1e-12


def test_init_params_is_seeded_and_perturbed():
    shape = ProblemShape(5, 3, 1, 2, (3, 4))
    a, b = init_params(shape, 9), init_params(shape, 9)
    assert a.same_as(b) and not a.same_as(init_params(shape, 10))
    assert np.array_equal(a.alpha, np.ones(3))
    for bm, km in zip(a.beta, (3, 4)):
        assert np.max(np.abs(bm - 1.0 / km)) <= 0.01
        assert np.max(np.abs(bm.sum(axis=1) - 1.0)) <= 1e-12


@pytest.fixture(scope="module")
def fitted(seed42):
    spec, sample = seed42
    return fit(sample.table, spec.shape)


def test_fit_report_invariants(fitted):
    r = fitted
    assert r.converged and r.outer_iterations == len(r.elbo_trace)
    assert np.all(np.diff(r.elbo_trace) >= -1e-8)
    assert np.all(r.posteriors >= 0)
    assert np.max(np.abs(r.posteriors.sum(axis=1) - 1.0)) <= 1e-12
    assert np.array_equal(r.predicted_class, np.argmax(r.posteriors, axis=1))
    r.params.check()


def test_fit_is_deterministic(seed42, fitted):
    spec, sample = seed42
    again = fit(sample.table, spec.shape)
    assert again.elbo_trace == fitted.elbo_trace
    assert again.params.same_as(fitted.params)
    assert np.array_equal(again.posteriors, fitted.posteriors)


def test_beta_stationary_at_convergence(seed42):
    spec, sample = seed42
    cfg = FitConfig(outer_tol=1e-13, max_outer_iters=2000)
    r = fit(sample.table, spec.shape, cfg)
    state, _ = e_step(r.params, sample.table, cfg.estep)
    again = m_step_beta(state, sample.table, cfg.eps_beta, spec.shape.clusters_per_clustering)
    for b0, b1 in zip(r.params.beta, again):
        assert np.max(np.abs(b0 - b1)) <= 1e-8


def test_permutation_equivariance(seed42, fitted):
    spec, sample = seed42
    perm = np.random.default_rng(1).permutation(spec.shape.n_instances)
    r = fit(sample.table.rows(perm), spec.shape)
    assert r.elbo_trace == fitted.elbo_trace
    assert np.array_equal(r.params.alpha, fitted.params.alpha)
    assert all(np.array_equal(a, b) for a, b in zip(r.params.beta, fitted.params.beta))
    assert np.array_equal(r.posteriors, fitted.posteriors[perm])


def test_without_clusterings_posterior_is_alpha_plus_votes():
    spec = standard_spec(n_instances=200, clusters=(), seed=4)
    t = sample_dataset(spec).table
    r = fit(t, spec.shape)
    counts = np.stack([np.bincount(row, minlength=3) for row in t.class_labels])
    expect = r.params.alpha + counts
    assert np.allclose(r.posteriors, expect / expect.sum(axis=1, keepdims=True), atol=1e-14)
    assert r.converged


def test_freeze_alpha(seed42):
    spec, sample = seed42
    r = fit(sample.table, spec.shape, FitConfig(freeze_alpha=True))
    assert np.array_equal(r.params.alpha, np.ones(3))
    assert np.all(np.diff(r.elbo_trace) >= -1e-8)


def test_sufficient_stats_total(seed42):
    spec, sample = seed42
    params = init_params(spec.shape, 0)
    state, _ = e_step(params, sample.table)
    st_ = sufficient_stats(params, state, sample.table)
    assert st_.count == 500
    for s in st_.beta_numerators:
        assert s.sum() == pytest.approx(500.0, abs=1e-9)
    assert np.allclose(st_.gamma_stats, gamma_stat_terms(state.gamma).sum(axis=0), rtol=1e-12)


def test_fit_config_validation():
    for kw in ({"outer_tol": -1.0}, {"eps_beta": 0.0}, {"alpha_floor": 0.0}, {"max_outer_iters": 0},
               {"newton_max_iters": 0}):
        with pytest.raises(ValidationError):
            FitConfig(**kw)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_outer_elbo_monotone_on_random_small_problems(seed):
    spec = standard_spec(n_instances=40, seed=seed)
    r = fit(sample_dataset(spec).table, spec.shape, FitConfig(max_outer_iters=30))
    assert np.all(np.diff(r.elbo_trace) >= -1e-8)


def test_inverse_digamma_round_trip():
    from bc3e.estimation import inverse_digamma
    x = np.geomspace(1e-9, 1e6, 500)
    assert np.max(np.abs(inverse_digamma(digamma(x)) - x) / x) <= 1e-12
