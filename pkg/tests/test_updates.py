import math

import numpy as np
import pytest
from scipy import integrate, stats

from rsbfm import updates
from rsbfm.model import ModelState
from rsbfm.updates import (A1_LOWER, A2_LOWER, delta_params, error_precision_params,
                           gamma_params, local_shrinkage_params, loadings_precision,
                           truncated_normal_proposal, update_a1_a2, update_delta,
                           update_error_precisions, update_gamma, update_loadings,
                           update_local_shrinkage)

import oracles
from conftest import assert_cov_within, assert_mean_within, make_state


def _draws(fn, n):
    return np.array([fn() for _ in range(n)])


# loadings

def test_loadings_without_data_follow_prior(rng):
    state = make_state(rng, 0, 3, 2)
    Y = np.zeros((0, 3))
    draws = _draws(lambda: update_loadings(state, Y, rng), 20000)
    var = 1.0 / (state.local_shrinkage * state.tau[None, :])
    assert_mean_within(draws, np.zeros((3, 2)))
    assert_mean_within(draws ** 2, var, what="second moment")


def test_loadings_with_unit_scales_match_gaussian_model(rng):
    state = make_state(rng, 6, 3, 2, gamma="ones")
    Y = rng.normal(size=(6, 3))
    prec, lin = loadings_precision(state, Y)
    eta = state.factors
    for j in range(3):
        expected = state.error_precisions[j] * eta.T @ eta + np.diag(state.local_shrinkage[j] * state.tau)
        assert np.allclose(prec[j], expected)
        assert np.allclose(lin[j], state.error_precisions[j] * eta.T @ Y[:, j])


def test_loadings_scalar_conjugate_moments(rng):
    state = ModelState(loadings=np.array([[0.3]]), error_precisions=np.array([2.0]),
                       factors=np.array([[0.5], [-1.0], [1.5]]), gamma=np.array([1.0, 0.5, 2.0]),
                       local_shrinkage=np.array([[0.7]]), delta=np.array([1.3]), a1=2.5, a2=3.5)
    Y = np.array([[0.4], [-0.9], [2.0]])
    # Psi = 1 / (phi tau + s sum gamma eta^2), mean Psi * s * sum gamma y eta
    psi = 1.0 / (0.7 * 1.3 + 2.0 * (0.25 + 0.5 + 2.0 * 2.25))
    b = 2.0 * (0.4 * 0.5 + 0.5 * 0.9 + 2.0 * 2.0 * 1.5)
    draws = _draws(lambda: update_loadings(state, Y, rng)[0, 0], 100000)
    assert_mean_within(draws, psi * b)
    assert_mean_within((draws - psi * b) ** 2, psi, what="variance")


def test_loadings_rows_match_dense_oracle(rng):
    state = make_state(rng, 5, 3, 2)
    Y = rng.normal(size=(5, 3))
    draws = _draws(lambda: update_loadings(state, Y, rng), 20000)
    for j in range(3):
        mean, cov = oracles.loading_row_oracle(state, Y, j)
        assert_mean_within(draws[:, j], mean)
        assert_cov_within(draws[:, j], mean, cov)


# error precisions

def test_error_precisions_without_data_follow_prior(rng):
    state = make_state(rng, 0, 2, 1)
    shape, rate = error_precision_params(state, np.zeros((0, 2)), 1.0, 0.3)
    assert shape == 1.0
    assert np.allclose(rate, 0.3)


def test_error_precisions_perfect_fit(rng):
    state = make_state(rng, 4, 3, 2)
    Y = state.factors @ state.loadings.T
    shape, rate = error_precision_params(state, Y, 1.0, 0.3)
    assert shape == 1.0 + 2.0
    assert np.allclose(rate, 0.3)


def test_error_precision_params_match_oracle(rng):
    state = make_state(rng, 7, 4, 3)
    Y = rng.normal(size=(7, 4))
    shape, rate = error_precision_params(state, Y, 1.0, 0.3)
    o_shape, o_rate = oracles.error_precision_oracle(state, Y, 1.0, 0.3)
    assert shape == o_shape
    assert np.allclose(rate, o_rate, rtol=1e-12)
    draws = _draws(lambda: update_error_precisions(state, Y, rng, 1.0, 0.3), 20000)
    assert_mean_within(draws, shape / rate)


# gamma

def test_gamma_hand_example():
    state = ModelState(loadings=np.zeros((2, 1)), error_precisions=np.ones(2),
                       factors=np.zeros((1, 1)), gamma=np.ones(1), local_shrinkage=np.ones((2, 1)),
                       delta=np.ones(1), a1=2.5, a2=3.5)
    shape, rate = gamma_params(state, np.zeros((1, 2)), 3.0)
    assert shape == 3.0
    assert np.allclose(rate, 1.5)


def test_gamma_shape_ignores_data(rng):
    state = make_state(rng, 4, 3, 2)
    s1, _ = gamma_params(state, rng.normal(size=(4, 3)), 5.0)
    s2, _ = gamma_params(state, 100 * rng.normal(size=(4, 3)), 5.0)
    assert s1 == s2 == (5.0 + 3 + 2) / 2


def test_gamma_params_match_oracle(rng):
    state = make_state(rng, 6, 4, 2)
    Y = rng.normal(size=(6, 4))
    shape, rate = gamma_params(state, Y, 3.0)
    o_shape, o_rate = oracles.gamma_oracle(state, Y, 3.0)
    assert shape == o_shape
    assert np.allclose(rate, o_rate, rtol=1e-12)
    draws = _draws(lambda: update_gamma(state, Y, rng, 3.0), 20000)
    assert_mean_within(draws, shape / rate)


# local shrinkage

def test_local_shrinkage_zero_loading():
    state = ModelState(loadings=np.zeros((1, 1)), error_precisions=np.ones(1), factors=np.zeros((1, 1)),
                       gamma=np.ones(1), local_shrinkage=np.ones((1, 1)), delta=np.array([2.0]),
                       a1=2.5, a2=3.5)
    shape, rate = local_shrinkage_params(state, 3.0)
    assert shape == 2.0 and np.allclose(rate, 1.5)


def test_local_shrinkage_unit_example(rng):
    state = ModelState(loadings=np.ones((1, 1)), error_precisions=np.ones(1), factors=np.zeros((1, 1)),
                       gamma=np.ones(1), local_shrinkage=np.ones((1, 1)), delta=np.array([1.0]),
                       a1=2.5, a2=3.5)
    shape, rate = local_shrinkage_params(state, 3.0)
    assert shape == 2.0 and np.allclose(rate, 2.0)
    draws = _draws(lambda: update_local_shrinkage(state, rng, 3.0)[0, 0], 20000)
    assert_mean_within(draws, 1.0)


def test_local_shrinkage_params_match_oracle(rng):
    state = make_state(rng, 2, 5, 3)
    shape, rate = local_shrinkage_params(state, 3.0)
    o_shape, o_rate = oracles.local_shrinkage_oracle(state, 3.0)
    assert shape == o_shape
    assert np.allclose(rate, o_rate, rtol=1e-12)


# delta

def test_delta_zero_loadings(rng):
    state = make_state(rng, 2, 4, 3)
    state.loadings[:] = 0.0
    shape, rate = delta_params(state.delta, 0, state.local_shrinkage, state.loadings, state.a1, state.a2)
    assert shape == state.a1 + 4 * 3 / 2
    assert rate == 1.0


def test_delta_single_column(rng):
    state = make_state(rng, 2, 4, 1)
    shape, rate = delta_params(state.delta, 0, state.local_shrinkage, state.loadings, state.a1, state.a2)
    assert shape == state.a1 + 2.0
    assert rate == pytest.approx(1 + 0.5 * np.sum(state.local_shrinkage * state.loadings ** 2))


def test_delta_params_match_oracle(rng):
    state = make_state(rng, 2, 4, 4)
    for h in range(4):
        got = delta_params(state.delta, h, state.local_shrinkage, state.loadings, state.a1, state.a2)
        want = oracles.delta_oracle(state.delta, h, state.local_shrinkage, state.loadings,
                                    state.a1, state.a2)
        assert got[0] == want[0]
        assert got[1] == pytest.approx(want[1], rel=1e-12)


@pytest.mark.parametrize("h", [0, 1])
def test_delta_conditional_mean_by_quadrature(rng, h):
    state = make_state(rng, 2, 3, 2)
    args = (state.delta, h, state.local_shrinkage, state.loadings, state.a1, state.a2)
    shape, rate = delta_params(*args)
    logf = lambda x: oracles.delta_log_conditional(x, *args)
    top = shape / rate + 40 * math.sqrt(shape) / rate
    ref = logf(shape / rate)
    z = integrate.quad(lambda x: math.exp(logf(x) - ref), 0, top, limit=200)[0]
    m = integrate.quad(lambda x: x * math.exp(logf(x) - ref), 0, top, limit=200)[0]
    assert abs(m / z - shape / rate) < 1e-3


def test_delta_sequential_draws_use_latest_values(rng):
    # Each delta_h, standardised through its conditional cdf given the values
    # drawn before it, must be uniform
    state = make_state(rng, 2, 3, 3)
    pits = []
    for _ in range(5000):
        new = update_delta(state, rng)
        row = []
        for h in range(3):
            current = np.concatenate([new[:h], state.delta[h:]])
            shape, rate = oracles.delta_oracle(current, h, state.local_shrinkage, state.loadings,
                                               state.a1, state.a2)
            row.append(stats.gamma.cdf(new[h], shape, scale=1 / rate))
        pits.append(row)
    pits = np.array(pits)
    for h in range(3):
        assert stats.kstest(pits[:, h], "uniform").pvalue > 0.001


# a1 and a2

def test_truncated_proposal_stays_above_bound(rng):
    for _ in range(2000):
        prop, _ = truncated_normal_proposal(2.01, 0.5, A1_LOWER, rng)
        assert prop > A1_LOWER


def test_truncated_proposal_distribution_and_correction(rng):
    cur, sd, lower = 2.3, 0.4, 2.0
    props = np.array([truncated_normal_proposal(cur, sd, lower, rng)[0] for _ in range(20000)])
    dist = stats.truncnorm((lower - cur) / sd, np.inf, loc=cur, scale=sd)
    assert stats.kstest(props, dist.cdf).pvalue > 0.001
    prop, corr = truncated_normal_proposal(cur, sd, lower, rng)
    back = stats.truncnorm((lower - prop) / sd, np.inf, loc=prop, scale=sd)
    assert corr == pytest.approx(back.logpdf(cur) - dist.logpdf(prop), abs=1e-10)


def test_below_bound_never_accepted(rng):
    assert updates.log_target_a1(1.99, np.array([1.0])) == -np.inf
    assert updates.log_target_a2(2.5, np.array([1.0, 1.0])) == -np.inf
    state = make_state(rng, 1, 2, 2, a1=2.0001, a2=3.0001)
    for _ in range(500):
        a1, a2, _, _ = update_a1_a2(state, rng, 5.0, 5.0)
        assert a1 > A1_LOWER and a2 > A2_LOWER


def _mh_chain(start, sd, lower, target, rng, n_keep, thin):
    x, out = start, []
    for t in range(n_keep * thin):
        x, _ = updates._mh(x, sd, lower, target, rng)
        if t % thin == thin - 1:
            out.append(x)
    return np.array(out)


def _quadrature_cdf(logf, lower):
    grid = np.linspace(lower, lower + 40, 40001)
    dens = np.exp([logf(x) for x in grid] - np.max([logf(x) for x in grid]))
    cdf = integrate.cumulative_trapezoid(dens, grid, initial=0)
    cdf /= cdf[-1]
    return lambda x: np.interp(x, grid, cdf)


def test_a2_with_single_column_is_truncated_prior(rng):
    delta = np.array([1.7])
    assert updates.log_target_a2(4.0, delta) - updates.log_target_a2(3.5, delta) == pytest.approx(
        stats.gamma.logpdf(4.0, 2) - stats.gamma.logpdf(3.5, 2))
    draws = _mh_chain(3.5, 1.0, A2_LOWER, lambda a: updates.log_target_a2(a, delta), rng, 20000, 5)
    prior = stats.gamma(2)
    cdf = lambda x: (prior.cdf(x) - prior.cdf(3.0)) / prior.sf(3.0)
    assert stats.kstest(draws, cdf).statistic < 0.03


def test_a1_long_run_matches_quadrature(rng):
    delta = np.array([3.2])
    target = lambda a: updates.log_target_a1(a, delta)
    draws = _mh_chain(2.5, 1.0, A1_LOWER, target, rng, 100000, 5)
    cdf = _quadrature_cdf(target, A1_LOWER)
    assert stats.kstest(draws, cdf).statistic < 0.02
