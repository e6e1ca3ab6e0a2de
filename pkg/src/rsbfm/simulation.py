"""Synthetic heavy-tailed data and covariance-estimate metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb
from typing import Optional

import numpy as np

from .errors import ParameterError
from .model import Dataset, check_symmetric
from .rng import gamma_draw

METRIC_COLUMNS = ["replicate_id", "p", "k", "nu0", "nu_model", "likelihood",
                  "one_norm", "two_norm", "mse", "aab", "mab", "elapsed_seconds"]


@dataclass
class SyntheticTruth:
    loadings: np.ndarray
    error_variances: np.ndarray
    nu0: float
    omega0: np.ndarray
    true_covariance: np.ndarray
    zero_mask: np.ndarray
    support_range: tuple = (1, 1)

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def k0(self) -> int:
        return self.loadings.shape[1]

    @property
    def zero_fraction(self) -> float:
        p = self.p
        return float(self.zero_mask.sum()) / (p * (p - 1)) if p > 1 else 0.0


def expected_zero_fraction(k0: int, lo: int, hi: int) -> float:
    """Chance that two rows with independent uniform supports share no factor.

    Support sizes are uniform on ``lo..hi`` and each support is a uniformly
    random subset of the ``k0`` factors of that size.
    """
    sizes = range(lo, hi + 1)
    total = 0.0
    for s, t in itertools.product(sizes, sizes):
        total += comb(k0 - s, t) / comb(k0, t)
    return total / len(sizes) ** 2


def choose_support_range(k0: int, target: float, tolerance: float = 0.05) -> tuple[int, int]:
    """Support-size range whose expected zero fraction is closest to ``target``.

    Ranges starting at 1 are preferred; a lower end of 0 (rows that load on
    no factor) is used only when no such range comes within half the
    tolerance and it does strictly better.
    """
    def best_of(lows):
        best = None
        for lo in lows:
            for hi in range(max(lo, 1), k0 + 1):
                gap = abs(expected_zero_fraction(k0, lo, hi) - target)
                if best is None or gap < best[0] - 1e-12:
                    best = (gap, (lo, hi))
        return best

    dense = best_of(range(1, k0 + 1))
    if dense[0] <= 0.5 * tolerance:
        return dense[1]
    anywhere = best_of(range(0, k0 + 1))
    return anywhere[1] if anywhere[0] < dense[0] - 1e-12 else dense[1]


def _truth_from(loadings, error_variances, nu0, support_range):
    omega0 = loadings @ loadings.T
    omega0 = 0.5 * (omega0 + omega0.T)
    omega0[np.diag_indices_from(omega0)] += error_variances
    zero_mask = omega0 == 0.0
    np.fill_diagonal(zero_mask, False)
    return SyntheticTruth(loadings=loadings, error_variances=error_variances, nu0=float(nu0),
                          omega0=omega0, true_covariance=nu0 / (nu0 - 2.0) * omega0,
                          zero_mask=zero_mask, support_range=tuple(support_range))


def generate_truth(p: int, k0: int, nu0: float, target_zero_fraction: float, rng,
                   support_range: Optional[tuple] = None, tolerance: float = 0.05,
                   max_retries: int = 200) -> SyntheticTruth:
    """Draw a sparse loading matrix and error variances.

    Row j of the loadings is nonzero on a random subset of factors whose size
    is uniform on ``support_range`` (size 0 leaves the row empty); nonzero
    entries are standard normal.
    Rows with disjoint supports give exact zeros in the scale matrix, and the
    draw is repeated until the off-diagonal zero fraction lies within
    ``tolerance`` of the target and every factor loads on some row.  Error
    variances are inverse-gamma with shape 1 and rate 1/4.
    """
    if not p >= k0 >= 1:
        raise ParameterError(f"need p >= k0 >= 1, got p={p}, k0={k0}")
    if not nu0 > 2:
        raise ParameterError(f"nu0 must exceed 2, got {nu0}")
    if not 0 <= target_zero_fraction <= 1:
        raise ParameterError("target_zero_fraction must lie in [0, 1]")
    if support_range is None:
        support_range = choose_support_range(k0, target_zero_fraction, tolerance)
    lo, hi = support_range
    if not (0 <= lo <= hi <= k0 and hi >= 1):
        raise ParameterError(f"support range {support_range} invalid for k0={k0}")

    for _ in range(max_retries):
        sizes = rng.integers(lo, hi + 1, size=p)
        mask = np.zeros((p, k0), dtype=bool)
        for j, s in enumerate(sizes):
            mask[j, rng.choice(k0, size=s, replace=False)] = True
        loadings = np.where(mask, rng.standard_normal((p, k0)), 0.0)
        error_variances = 1.0 / gamma_draw(rng, 1.0, 0.25 * np.ones(p))
        truth = _truth_from(loadings, error_variances, nu0, support_range)
        if mask.any(axis=0).all() and abs(truth.zero_fraction - target_zero_fraction) <= tolerance:
            return truth
    raise ParameterError(
        f"could not reach zero fraction {target_zero_fraction} +/- {tolerance} "
        f"with p={p}, k0={k0} after {max_retries} attempts")


def sample_dataset(truth: SyntheticTruth, n: int, rng, source_tag: str = "synthetic") -> Dataset:
    """Draw n observations from the multivariate t with scale ``truth.omega0``."""
    if n < 1:
        raise ParameterError("n must be at least 1")
    p, k0 = truth.loadings.shape
    gam = gamma_draw(rng, 0.5 * truth.nu0, 0.5 * truth.nu0 * np.ones(n))
    eta = rng.standard_normal((n, k0))
    err = rng.standard_normal((n, p)) * np.sqrt(truth.error_variances)
    y = (eta @ truth.loadings.T + err) / np.sqrt(gam)[:, None]
    return Dataset(y, source_tag=source_tag)


@dataclass
class MetricReport:
    one_norm: float
    two_norm: float
    mse: float
    aab: float
    mab: float

    def csv_row(self, replicate_id, p, k, nu0, nu_model, likelihood, elapsed_seconds=None):
        values = [replicate_id, p, k, nu0, nu_model, likelihood,
                  self.one_norm, self.two_norm, self.mse, self.aab, self.mab, elapsed_seconds]
        return dict(zip(METRIC_COLUMNS, values))


def spectral_norm(a: np.ndarray, tol: float = 1e-8, max_iter: int = 100000) -> float:
    """Largest singular value; power iteration on a'a, dense SVD below 64 columns.

    Iteration stops once the eigen-residual ||G v - lambda v|| falls below
    ``tol * lambda``, which stays reliable when the top two singular values
    are close.
    """
    a = np.asarray(a, dtype=float)
    if a.shape[1] < 64:
        return float(np.linalg.svd(a, compute_uv=False)[0]) if a.size else 0.0
    gram = a.T @ a
    v = np.ones(a.shape[1]) + np.linspace(0.0, 1.0, a.shape[1])
    v /= np.linalg.norm(v)
    value = 0.0
    for _ in range(max_iter):
        w = gram @ v
        value = float(v @ w)
        if value <= 0.0:
            return 0.0
        if np.linalg.norm(w - value * v) <= tol * value:
            break
        v = w / np.linalg.norm(w)
    return float(np.sqrt(value))


def evaluate_estimate(estimate, truth) -> MetricReport:
    """Compare a covariance estimate against the true covariance.

    ``truth`` is a :class:`SyntheticTruth` or the true covariance matrix.
    """
    est = np.asarray(estimate, dtype=float)
    target = truth.true_covariance if isinstance(truth, SyntheticTruth) else np.asarray(truth)
    check_symmetric(est, 1e-8, "estimate")
    if est.shape != target.shape:
        raise ParameterError(f"estimate {est.shape} and truth {target.shape} differ in shape")
    err = est - target
    p = err.shape[0]
    absolute = np.abs(err)
    return MetricReport(
        one_norm=float(absolute.sum(axis=0).max()),
        two_norm=spectral_norm(err),
        mse=float(np.sum(err * err)) / p ** 2,
        aab=float(absolute.sum()) / p ** 2,
        mab=float(absolute.max()),
    )


def zero_entry_percentiles(estimate, zero_mask) -> tuple[float, float]:
    """10th and 90th percentiles of estimated entries whose true value is zero.

    Uses linear interpolation between order statistics.
    """
    values = np.asarray(estimate, dtype=float)[np.asarray(zero_mask, dtype=bool)]
    if values.size == 0:
        raise ParameterError("zero mask selects no entries")
    p10, p90 = np.percentile(values, [10, 90])
    return float(p10), float(p90)
