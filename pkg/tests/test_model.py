import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from scipy.special import gammaln

from rsbfm.errors import NumericalError, ParameterError, StructuralError
from rsbfm.model import (Dataset, ModelState, PosteriorSummary, SamplerConfig, check_symmetric,
                         cholesky, credible_interval, eta_conditional_params,
                         reconstruct_covariance, t_log_density, t_log_density_grad)

from conftest import make_state


# Dataset

def test_dataset_accepts_matrix():
    d = Dataset(np.ones((3, 2)), variable_names=["a", "b"])
    assert (d.n, d.p) == (3, 2)


@pytest.mark.parametrize("bad", [np.ones(3), np.ones((0, 2)), np.ones((2, 0))])
def test_dataset_rejects_bad_shapes(bad):
    with pytest.raises(StructuralError):
        Dataset(bad)


def test_dataset_reports_nonfinite_cell():
    y = np.ones((3, 2))
    y[2, 1] = np.nan
    with pytest.raises(StructuralError, match="row 2.*column 1"):
        Dataset(y)


# ModelState

def test_state_tau_is_cumulative_product(rng):
    s = make_state(rng, 4, 3, 3)
    assert np.allclose(s.tau, np.cumprod(s.delta))
    s.validate()


def test_state_rejects_mismatched_k(rng):
    s = make_state(rng, 4, 3, 3)
    s.delta = s.delta[:2]
    with pytest.raises(StructuralError):
        s.validate()


def test_state_rejects_nonpositive_precision(rng):
    s = make_state(rng, 4, 3, 2)
    s.gamma[1] = 0.0
    with pytest.raises((StructuralError, ParameterError)):
        s.validate()


# SamplerConfig

def test_config_defaults_follow_experiment_settings():
    c = SamplerConfig()
    assert (c.n_iterations, c.n_burnin) == (20000, 5000)
    assert (c.trunc_threshold, c.trunc_proportion) == (0.01, 0.7)
    assert (c.adapt_intercept, c.adapt_slope) == (-1.2, -0.0004)
    c.validate()


@pytest.mark.parametrize("changes", [
    dict(n_burnin=100, n_iterations=100),
    dict(initial_k=10, max_k=5),
    dict(nu=0.0),
    dict(likelihood="cauchy"),
    dict(eta_sampler_mode="slice"),
    dict(nuts_step_size=-1.0),
    dict(thin=0),
])
def test_config_rejects_invalid(changes):
    with pytest.raises(ParameterError):
        SamplerConfig(**changes).validate()


def test_resolved_k_defaults():
    assert SamplerConfig().resolved_k(200) == (int(5 * math.log(200)), 200)
    assert SamplerConfig().resolved_k(3) == (3, 3)
    assert SamplerConfig(initial_k=4, max_k=6).resolved_k(50) == (4, 6)


# reconstruct_covariance

def test_reconstruct_zero_loadings():
    omega = reconstruct_covariance(np.zeros((2, 1)), np.array([1.0, 4.0]))
    assert np.array_equal(omega, np.diag([1.0, 0.25]))


def test_reconstruct_hand_example():
    omega = reconstruct_covariance(np.array([[1.0], [1.0]]), np.ones(2))
    assert np.array_equal(omega, np.array([[2.0, 1.0], [1.0, 2.0]]))


def test_reconstruct_matches_naive_loops(rng):
    lam = rng.normal(size=(5, 2))
    omega = reconstruct_covariance(lam, np.ones(5))
    naive = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            for h in range(2):
                naive[i, j] += lam[i, h] * lam[j, h]
        naive[i, i] += 1.0
    assert np.max(np.abs(omega - naive)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(p=st.integers(1, 8), k=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_reconstruct_is_symmetric_positive_definite(p, k, seed):
    r = np.random.default_rng(seed)
    omega = reconstruct_covariance(r.normal(size=(p, k)) * 3, r.gamma(1.0, 1.0, size=p) + 1e-3)
    assert np.array_equal(omega, omega.T)
    assert np.linalg.eigvalsh(omega).min() > 0


def test_reconstruct_psd_over_many_states(rng):
    for _ in range(1000):
        p, k = int(rng.integers(1, 12)), int(rng.integers(1, 6))
        lam = rng.normal(size=(p, k)) * rng.gamma(0.5, 4.0, size=k)
        omega = reconstruct_covariance(lam, rng.gamma(1.0, 1.0, size=p) + 1e-6)
        ev = np.linalg.eigvalsh(omega)
        assert ev.min() >= -1e-10 * ev.max()


def test_reconstruct_rejects_inconsistent_shapes():
    with pytest.raises(StructuralError):
        reconstruct_covariance(np.zeros((3, 2)), np.ones(2))


# cholesky

def test_cholesky_reports_failing_pivot():
    a = np.diag([1.0, 2.0, -1.0])
    with pytest.raises(NumericalError) as info:
        cholesky(a)
    assert info.value.index == 2


# t_log_density

def test_t_density_scalar_at_zero():
    # t_3 density at 0 is Gamma(2) / (Gamma(1.5) sqrt(3 pi))
    expected = -gammaln(1.5) - 0.5 * math.log(3 * math.pi)
    assert t_log_density([0.0], 3.0, [0.0], [[1.0]]) == pytest.approx(expected, abs=1e-12)
    assert t_log_density([0.0], 3.0, [0.0], [[1.0]]) == pytest.approx(-1.00088, abs=1e-5)


def test_t_density_bivariate_at_zero():
    expected = gammaln(3.5) - gammaln(2.5) - math.log(5 * math.pi)
    assert t_log_density(np.zeros(2), 5.0, np.zeros(2), np.eye(2)) == pytest.approx(expected, abs=1e-12)
    # logGamma(3.5) - logGamma(2.5) = log 2.5
    assert expected == pytest.approx(math.log(2.5 / (5 * math.pi)), abs=1e-14)


def test_t_density_matches_scipy(rng):
    for _ in range(20):
        p = rng.integers(1, 6)
        a = rng.normal(size=(p, p))
        omega = a @ a.T + p * np.eye(p)
        mu, y = rng.normal(size=p), rng.normal(size=p) * 3
        nu = rng.uniform(1, 20)
        ref = stats.multivariate_t(loc=mu, shape=omega, df=nu).logpdf(y)
        assert t_log_density(y, nu, mu, omega) == pytest.approx(ref, rel=1e-10, abs=1e-10)


@pytest.mark.parametrize("nu", [3.0, 7.0])
@pytest.mark.parametrize("omega", [0.5, 1.0, 4.0])
def test_t_density_integrates_to_one(nu, omega):
    f = lambda x: math.exp(t_log_density([x], nu, [0.0], [[omega]]))
    total = sum(integrate.quad(f, a, b, limit=200, epsabs=1e-12, epsrel=1e-12)[0]
                for a, b in ((-200, -10), (-10, 10), (10, 200)))
    # mass beyond +-200 is below 1e-6 for these scales and degrees of freedom
    assert abs(total - 1.0) < 1e-6 + 2 * stats.t(nu, scale=math.sqrt(omega)).sf(200)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**31), p=st.integers(1, 6), c=st.floats(0.01, 100))
def test_t_density_affine_identity(seed, p, c):
    r = np.random.default_rng(seed)
    a = r.normal(size=(p, p))
    omega = a @ a.T + np.eye(p)
    mu, y = r.normal(size=p), r.normal(size=p) * 2
    lhs = t_log_density(c * y, 4.0, c * mu, c * c * omega)
    rhs = t_log_density(y, 4.0, mu, omega) - p * math.log(c)
    assert lhs == pytest.approx(rhs, abs=1e-10 * max(1.0, abs(rhs)))


def test_t_density_gaussian_limit(rng):
    a = rng.normal(size=(3, 3))
    omega = a @ a.T + np.eye(3)
    mu = rng.normal(size=3)
    for _ in range(10):
        y = mu + rng.normal(size=3)
        ref = stats.multivariate_normal(mu, omega).logpdf(y)
        assert abs(t_log_density(y, 1e6, mu, omega) - ref) < 1e-3


# t_log_density_grad

def test_grad_zero_at_mode(rng):
    mu = rng.normal(size=3)
    assert np.allclose(t_log_density_grad(mu, 4.0, mu, np.eye(3)), 0.0)


def test_grad_scalar():
    assert t_log_density_grad([1.0], 3.0, [0.0], [[1.0]]) == pytest.approx([-1.0])


def _central_difference(f, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_grad_matches_finite_differences(rng):
    a = rng.normal(size=(4, 4))
    scale = a @ a.T + np.eye(4)
    mu = rng.normal(size=4)
    x = mu + rng.normal(size=4) * 2
    g = t_log_density_grad(x, 5.0, mu, scale)
    fd = _central_difference(lambda z: t_log_density(z, 5.0, mu, scale), x)
    assert np.linalg.norm(g - fd) / np.linalg.norm(g) < 1e-5


# eta_conditional_params

def test_eta_conditional_zero_loadings(rng):
    y = rng.normal(size=4)
    prec = rng.gamma(2.0, 1.0, size=4)
    df, loc, scale = eta_conditional_params(y, np.zeros((4, 2)), prec, 3.0)
    assert df == 7.0
    assert np.allclose(loc, 0.0)
    assert np.allclose(scale, (3.0 + np.sum(prec * y ** 2)) / 7.0 * np.eye(2))


def test_eta_conditional_hand_example():
    df, loc, scale = eta_conditional_params(np.ones(2), np.ones((2, 1)), np.ones(2), 3.0)
    assert df == 5.0
    assert loc[0] == pytest.approx(2.0 / 3.0, abs=1e-14)
    assert scale[0, 0] == pytest.approx(11.0 / 45.0, abs=1e-14)


def test_eta_conditional_matches_dense_formula(rng):
    # Dense oracle: the p x p covariance is inverted directly
    for _ in range(10):
        p, k = rng.integers(2, 7), rng.integers(1, 4)
        lam = rng.normal(size=(p, k))
        prec = rng.gamma(2.0, 1.0, size=p)
        y = rng.normal(size=p) * 2
        nu = rng.uniform(2.5, 10)
        omega = lam @ lam.T + np.diag(1 / prec)
        quad = y @ np.linalg.solve(omega, y)
        P = np.eye(k) + lam.T @ np.diag(prec) @ lam
        loc = np.linalg.solve(P, lam.T @ (prec * y))
        scale = (nu + quad) / (nu + p) * np.linalg.inv(P)
        df, l, s = eta_conditional_params(y, lam, prec, nu)
        assert df == nu + p
        assert np.allclose(l, loc, atol=1e-12)
        assert np.allclose(s, scale, atol=1e-12)


# misc helpers

def test_check_symmetric():
    check_symmetric(np.eye(3))
    with pytest.raises(ParameterError):
        check_symmetric(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_credible_interval_endpoints_attained():
    values = np.array([3] * 10 + [4] * 80 + [5] * 10)
    lo, hi = credible_interval(values)
    assert lo <= hi
    assert lo in values and hi in values


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=200))
def test_credible_interval_property(values):
    lo, hi = credible_interval(values)
    assert lo <= hi and lo in values and hi in values


def test_posterior_summary_k_mode():
    s = PosteriorSummary(np.eye(2), np.eye(2), None, [], np.zeros((3, 0)),
                         np.array([2, 3, 3]), (2, 3), {}, 0.0, 3)
    assert s.k_mode == 3
