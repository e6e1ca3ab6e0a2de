import numpy as np
import pytest

from rsbfm.model import ModelState


def make_state(rng, n, p, k, a1=2.5, a2=3.5, gamma=None):
    """Random but well-conditioned toy state."""
    return ModelState(
        loadings=rng.normal(size=(p, k)),
        error_precisions=0.5 + rng.gamma(2.0, 0.5, size=p),
        factors=rng.normal(size=(n, k)),
        gamma=np.ones(n) if gamma == "ones" else 0.3 + rng.gamma(2.0, 0.5, size=n),
        local_shrinkage=0.3 + rng.gamma(2.0, 0.5, size=(p, k)),
        delta=0.5 + rng.gamma(2.0, 0.5, size=k),
        a1=a1,
        a2=a2,
    )


def assert_mean_within(draws, expected, n_se=3.0, what="mean"):
    """Sample mean of each column lies within n_se Monte Carlo standard errors."""
    draws = np.asarray(draws, dtype=float).reshape(len(draws), -1)
    expected = np.asarray(expected, dtype=float).ravel()
    se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
    gap = np.abs(draws.mean(axis=0) - expected)
    bad = gap > n_se * se
    assert not bad.any(), f"{what}: gap {gap[bad]} exceeds {n_se} SE {se[bad]}"


def assert_cov_within(draws, mean, cov, n_se=3.0):
    """Each entry of the sample covariance (about the known mean) within n_se SE."""
    draws = np.asarray(draws, dtype=float)
    dev = draws - mean
    prods = dev[:, :, None] * dev[:, None, :]
    n = draws.shape[0]
    est = prods.mean(axis=0)
    se = prods.std(axis=0, ddof=1) / np.sqrt(n)
    gap = np.abs(est - cov)
    bad = gap > n_se * se
    assert not bad.any(), f"covariance gap {gap[bad]} exceeds {n_se} SE {se[bad]}"


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    """Record one acceptance line; it is echoed in the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
