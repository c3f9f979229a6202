import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bc3e import kernels
from bc3e.errors import AllNegativeInfinity, DomainError
from bc3e.special import digamma, log_gamma, normalize_in_log_space, normalize_rows, row_sum, trigamma

from oracles import digamma_hp, log_gamma_hp, trigamma_hp

EULER = 0.57721566490153286


def test_digamma_known_values():
    assert digamma(1.0) == pytest.approx(-EULER, abs=1e-13)
    assert digamma(2.0) == pytest.approx(1.0 - EULER, abs=1e-13)
    assert digamma(0.5) == pytest.approx(-1.9635100260214235, abs=1e-13)


def test_log_gamma_known_values():
    assert log_gamma(1.0) == 0.0
    assert log_gamma(2.0) == 0.0
    assert log_gamma(5.0) == pytest.approx(3.1780538303479458, rel=1e-15)
    assert np.all(log_gamma(np.array([1.0, 2.0])) == 0.0)


def _grid():
    return np.concatenate([np.geomspace(1e-6, 1e6, 700), np.linspace(0.05, 12.0, 300)])


def test_digamma_absolute_error_against_mpmath():
    xs = _grid()
    ref = np.array([digamma_hp(x) for x in xs])
    assert np.max(np.abs(digamma(xs) - ref)) <= 1e-10
    assert max(abs(digamma(float(x)) - r) for x, r in zip(xs, ref)) <= 1e-10


def test_log_gamma_relative_error_against_mpmath():
    xs = _grid()
    ref = np.array([log_gamma_hp(x) for x in xs])
    # near the roots at 1 and 2 the value itself vanishes, so relative error is
    # measured against max(1, |log Gamma|)
    scale = np.maximum(1.0, np.abs(ref))
    assert np.max(np.abs(log_gamma(xs) - ref) / scale) <= 1e-12
    away = np.abs(ref) > 0.1
    assert np.max(np.abs(log_gamma(xs[away]) - ref[away]) / np.abs(ref[away])) <= 1e-12


def test_trigamma_against_mpmath():
    xs = np.geomspace(1e-3, 1e4, 300)
    ref = np.array([trigamma_hp(x) for x in xs])
    assert np.max(np.abs(trigamma(xs) - ref) / ref) <= 1e-11


def test_scalar_and_array_paths_agree():
    xs = _grid()
    for f in (digamma, log_gamma, trigamma):
        arr = f(xs)
        scal = np.array([f(float(x)) for x in xs])
        assert np.max(np.abs(arr - scal) / np.maximum(1.0, np.abs(arr))) <= 1e-14


def test_compiled_kernels_match_numpy_functions():
    xs = _grid()
    dg = np.array([kernels.digamma(x, kernels._DG, 6.0) for x in xs])
    lg = np.array([kernels.log_gamma(x, kernels._LG, 10.0) for x in xs])
    assert np.max(np.abs(dg - digamma(xs))) <= 1e-14
    assert np.max(np.abs(lg - log_gamma(xs)) / np.maximum(1.0, np.abs(lg))) <= 1e-14


@pytest.mark.parametrize("f", [digamma, log_gamma, trigamma])
@pytest.mark.parametrize("bad", [0.0, -1.0, float("nan")])
def test_domain_errors(f, bad):
    with pytest.raises(DomainError):
        f(bad)
    with pytest.raises(DomainError):
        f(np.array([1.0, bad]))


def test_digamma_recurrence_property(rng):
    x = rng.uniform(0.0, 100.0, 10_000)
    x = x[x > 0]
    assert np.max(np.abs(digamma(x + 1.0) - digamma(x) - 1.0 / x)) <= 1e-10


def test_log_gamma_recurrence_property(rng):
    x = rng.uniform(1e-3, 100.0, 10_000)
    assert np.max(np.abs(log_gamma(x + 1.0) - log_gamma(x) - np.log(x))) <= 1e-10


def test_elementwise_results_do_not_depend_on_batch(rng):
    x = rng.uniform(1e-4, 50.0, 257)
    for f in (digamma, log_gamma, trigamma):
        whole = f(x)
        parts = np.concatenate([f(x[:1]), f(x[1:100]), f(x[100:])])
        assert np.array_equal(whole, parts)


def test_row_sum_is_left_to_right():
    a = np.array([[1e16, 1.0, -1e16, 1.0]])
    assert row_sum(a)[0] == ((1e16 + 1.0) - 1e16) + 1.0


def test_normalize_examples():
    assert np.array_equal(normalize_in_log_space([0.0, 0.0]), [0.5, 0.5])
    assert np.allclose(normalize_in_log_space([math.log(9), 0.0]), [0.9, 0.1], atol=1e-16)
    p = normalize_in_log_space([-1000.0, 0.0])
    assert np.all(np.isfinite(p)) and p[1] == 1.0 and 0.0 <= p[0] < 1e-300


def test_normalize_all_negative_infinity():
    with pytest.raises(AllNegativeInfinity):
        normalize_in_log_space([-np.inf, -np.inf])
    with pytest.raises(AllNegativeInfinity):
        normalize_rows(np.array([[0.0, 1.0], [-np.inf, -np.inf]]))


finite = st.floats(-700.0, 700.0, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(st.lists(finite, min_size=1, max_size=12), st.floats(-50.0, 50.0))
def test_normalize_properties(lw, shift):
    p = normalize_in_log_space(lw)
    assert abs(p.sum() - 1.0) <= 1e-15 * len(lw) + 1e-15
    assert np.all(p >= 0)
    order = np.argsort(lw, kind="stable")
    assert np.all(np.diff(p[order]) >= 0)
    q = normalize_in_log_space(np.asarray(lw) + shift)
    assert np.max(np.abs(p - q)) <= 1e-13


dyadic = st.integers(-700 * 1024, 700 * 1024).map(lambda v: v / 1024.0)


@settings(max_examples=300, deadline=None)
@given(st.lists(dyadic, min_size=1, max_size=12), st.integers(-64, 64))
def test_normalize_shift_invariance_within_1e15(lw, shift):
    # shifts that are exact in floating point leave every element unchanged
    p = normalize_in_log_space(lw)
    q = normalize_in_log_space(np.asarray(lw) + float(shift))
    assert np.max(np.abs(p - q)) <= 1e-15


def test_normalize_shift_invariance_is_exact_for_representable_shifts():
    lw = np.array([-3.25, 0.5, 2.0, -0.125])
    assert np.array_equal(normalize_in_log_space(lw), normalize_in_log_space(lw + 8.0))
