"""Domain types and density evaluations for the robust factor model.

All covariance algebra goes through Cholesky factors; nothing here forms an
explicit matrix inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf
from scipy.special import gammaln

from .errors import NumericalError, ParameterError, StructuralError


@dataclass
class Dataset:
    observations: np.ndarray
    variable_names: Optional[list] = None
    source_tag: str = ""

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim != 2:
            raise StructuralError(f"observations must be 2-d, got shape {obs.shape}")
        n, p = obs.shape
        if n < 1 or p < 1:
            raise StructuralError(f"need n >= 1 and p >= 1, got {obs.shape}")
        if not np.all(np.isfinite(obs)):
            i, j = np.argwhere(~np.isfinite(obs))[0]
            raise StructuralError(f"non-finite observation at row {i}, column {j}")
        if self.variable_names is not None and len(self.variable_names) != p:
            raise StructuralError(
                f"{len(self.variable_names)} variable names for {p} columns"
            )
        self.observations = obs

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def p(self) -> int:
        return self.observations.shape[1]


@dataclass
class ModelState:
    """Per-chain latent quantities.

    ``error_precisions`` holds the diagonal of the inverse error covariance,
    ``local_shrinkage`` the p x k matrix of entrywise precisions and ``delta``
    the multiplicative gamma process increments whose cumulative products
    give the column precisions ``tau``.
    """

    loadings: np.ndarray
    error_precisions: np.ndarray
    factors: np.ndarray
    gamma: np.ndarray
    local_shrinkage: np.ndarray
    delta: np.ndarray
    a1: float
    a2: float

    @property
    def k(self) -> int:
        return self.loadings.shape[1]

    @property
    def tau(self) -> np.ndarray:
        return np.cumprod(self.delta)

    def copy(self) -> "ModelState":
        return ModelState(
            loadings=self.loadings.copy(),
            error_precisions=self.error_precisions.copy(),
            factors=self.factors.copy(),
            gamma=self.gamma.copy(),
            local_shrinkage=self.local_shrinkage.copy(),
            delta=self.delta.copy(),
            a1=float(self.a1),
            a2=float(self.a2),
        )

    def validate(self) -> None:
        p, k = self.loadings.shape
        n = self.factors.shape[0]
        if self.factors.shape != (n, k) or self.local_shrinkage.shape != (p, k):
            raise StructuralError(
                f"column counts disagree: loadings {self.loadings.shape}, "
                f"factors {self.factors.shape}, local_shrinkage {self.local_shrinkage.shape}"
            )
        if self.delta.shape != (k,):
            raise StructuralError(f"delta has length {self.delta.size}, expected {k}")
        if self.error_precisions.shape != (p,) or self.gamma.shape != (n,):
            raise StructuralError("error_precisions/gamma lengths do not match p/n")
        for name in ("error_precisions", "gamma", "local_shrinkage", "delta"):
            arr = getattr(self, name)
            if not np.all(arr > 0):
                raise StructuralError(f"{name} must be strictly positive")
        tau = self.tau
        if not np.all(np.isfinite(tau)) or not np.all(tau > 0):
            raise StructuralError("cumulative column precisions are not finite and positive")
        if not (self.a1 > 2 and self.a2 > 3):
            raise StructuralError(f"a1={self.a1}, a2={self.a2} outside (2, inf) x (3, inf)")


@dataclass
class SamplerConfig:
    nu: float = 3.0
    a_sigma: float = 1.0
    b_sigma: float = 0.3
    kappa: float = 3.0
    nuts_step_size: float = 0.025
    nuts_max_depth: int = 10
    adapt_intercept: float = -1.2
    adapt_slope: float = -0.0004
    trunc_threshold: float = 0.01
    trunc_proportion: float = 0.7
    mh_sd_a1: float = 0.2
    mh_sd_a2: float = 0.2
    n_iterations: int = 20000
    n_burnin: int = 5000
    thin: int = 1
    initial_k: Optional[int] = None
    max_k: Optional[int] = None
    min_k: int = 1
    seed: int = 0
    eta_sampler_mode: str = "nuts"
    # "t" for the Student-t likelihood, "normal" forces gamma == 1
    likelihood: str = "t"
    adapt: bool = True
    tune_mh: bool = True
    keep_covariance_samples: bool = False
    covariance_sample_cap: int = 300
    tracked_entries: list = field(default_factory=list)
    checkpoint_dir: Optional[str] = None
    checkpoint_every: int = 1000
    parallel: bool = False
    progress_every: int = 0

    def validate(self) -> None:
        positive = ("a_sigma", "b_sigma", "kappa", "nuts_step_size",
                    "trunc_threshold", "mh_sd_a1", "mh_sd_a2")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.nu > 2:
            raise ParameterError(f"nu must exceed 2, got {self.nu}")
        for name in ("nuts_max_depth", "n_iterations", "thin", "min_k", "checkpoint_every"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be a positive integer")
        if not 0 <= self.n_burnin < self.n_iterations:
            raise ParameterError(
                f"n_burnin={self.n_burnin} must be below n_iterations={self.n_iterations}"
            )
        if not 0 < self.trunc_proportion < 1:
            raise ParameterError("trunc_proportion must lie in (0, 1)")
        # exp(intercept + slope * t) stays in (0, 1) for every t >= 0
        if not (self.adapt_intercept < 0 and self.adapt_slope <= 0):
            raise ParameterError("adaptation probability must stay in (0, 1): "
                                 "need adapt_intercept < 0 and adapt_slope <= 0")
        if self.initial_k is not None and self.initial_k < 1:
            raise ParameterError("initial_k must be positive")
        if self.max_k is not None and self.max_k < 1:
            raise ParameterError("max_k must be positive")
        if self.initial_k is not None and self.max_k is not None and self.initial_k > self.max_k:
            raise ParameterError(f"initial_k={self.initial_k} exceeds max_k={self.max_k}")
        if self.eta_sampler_mode not in ("nuts", "exact"):
            raise ParameterError(f"eta_sampler_mode must be 'nuts' or 'exact'")
        if self.likelihood not in ("t", "normal"):
            raise ParameterError("likelihood must be 't' or 'normal'")

    def resolved_k(self, p: int) -> tuple[int, int]:
        """Return (initial_k, max_k) with defaults filled in for dimension p."""
        max_k = self.max_k if self.max_k is not None else p
        if self.initial_k is not None:
            init = self.initial_k
        else:
            init = max(1, min(int(math.floor(5 * math.log(p))), max_k))
        if init > max_k:
            raise ParameterError(f"initial_k={init} exceeds max_k={max_k}")
        return init, max_k


@dataclass
class PosteriorSummary:
    """Retained-draw summary of one chain.

    ``mean_covariance`` estimates the covariance of the observations; under
    the t likelihood each draw is ``nu / (nu - 2) * (L L' + Sigma)``.
    ``mean_scale`` is the posterior mean of ``L L' + Sigma`` itself, the
    scale matrix that enters the t density.
    """

    mean_covariance: np.ndarray
    mean_scale: np.ndarray
    covariance_samples: Optional[np.ndarray]
    tracked_entries: list
    tracked_samples: np.ndarray
    k_trace: np.ndarray
    k_credible_interval: tuple
    acceptance_rates: dict
    elapsed_seconds: float
    n_samples: int
    diagnostics: list = field(default_factory=list, repr=False)
    final_state: Optional[ModelState] = field(default=None, repr=False)
    adaptation_events: list = field(default_factory=list, repr=False)

    @property
    def k_mode(self) -> int:
        values, counts = np.unique(self.k_trace, return_counts=True)
        return int(values[np.argmax(counts)])


def cholesky(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor; raises NumericalError naming the failing pivot."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise StructuralError(f"{what} must be square, got shape {a.shape}")
    c, info = dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NumericalError(
            f"{what} is not positive definite (pivot {info - 1} failed)", index=info - 1
        )
    if info < 0:
        raise NumericalError(f"invalid argument {-info} passed to dpotrf")
    return c


def reconstruct_covariance(loadings, error_precisions) -> np.ndarray:
    """Return ``loadings @ loadings.T + diag(1 / error_precisions)``."""
    lam = np.asarray(loadings, dtype=float)
    prec = np.asarray(error_precisions, dtype=float)
    if lam.ndim != 2 or prec.ndim != 1 or lam.shape[0] != prec.shape[0]:
        raise StructuralError(
            f"loadings {lam.shape} and error precisions {prec.shape} are inconsistent"
        )
    if not np.all(prec > 0):
        raise StructuralError("error precisions must be strictly positive")
    omega = lam @ lam.T
    omega = 0.5 * (omega + omega.T)
    omega[np.diag_indices_from(omega)] += 1.0 / prec
    return omega


def t_log_density(y, nu: float, mu, omega) -> float:
    """Log density of the multivariate Student-t with scale matrix ``omega``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mu = np.broadcast_to(np.asarray(mu, dtype=float), y.shape)
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    p = y.shape[0]
    if omega.shape != (p, p):
        raise StructuralError(f"scale matrix {omega.shape} does not match dimension {p}")
    chol = cholesky(omega, "scale matrix")
    z = solve_triangular(chol, y - mu, lower=True, check_finite=False)
    q = float(z @ z)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(
        gammaln(0.5 * (nu + p)) - gammaln(0.5 * nu) - 0.5 * p * math.log(nu * math.pi)
        - 0.5 * logdet - 0.5 * (nu + p) * math.log1p(q / nu)
    )


def t_log_density_grad(x, nu: float, mu, scale) -> np.ndarray:
    """Gradient in ``x`` of :func:`t_log_density`."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k = x.shape[0]
    diff = x - np.broadcast_to(np.asarray(mu, dtype=float), x.shape)
    chol = cholesky(np.atleast_2d(scale), "scale matrix")
    u = cho_solve((chol, True), diff, check_finite=False)
    q = float(diff @ u)
    return -((nu + k) / (nu + q)) * u


def _precision_factor(loadings, error_precisions):
    """Cholesky factor of I + L^T diag(s) L, the eta posterior precision."""
    k = loadings.shape[1]
    weighted = loadings * error_precisions[:, None]
    prec = loadings.T @ weighted
    prec = 0.5 * (prec + prec.T)
    prec[np.diag_indices(k)] += 1.0
    return cholesky(prec, "factor precision I + L'S^-1L"), weighted


def eta_conditional_batch(Y, loadings, error_precisions, nu):
    """Collapsed conditional of every factor vector at once.

    Returns ``(df, locations, scale_multipliers, chol)`` where the scale of
    observation i is ``scale_multipliers[i] * inv(chol @ chol.T)``.  The
    quadratic form y' Omega^-1 y uses the Woodbury identity so no p x p
    factorization is needed.
    """
    Y = np.asarray(Y, dtype=float)
    p = loadings.shape[0]
    chol, weighted = _precision_factor(loadings, error_precisions)
    B = Y @ weighted
    if B.shape[0]:
        M = cho_solve((chol, True), B.T, check_finite=False).T
    else:
        M = np.zeros_like(B)
    quad = (Y * Y) @ error_precisions - np.sum(B * M, axis=1)
    quad = np.maximum(quad, 0.0)
    mult = (nu + quad) / (nu + p)
    return nu + p, M, mult, chol


def eta_conditional_params(y, loadings, error_precisions, nu):
    """Student-t full conditional of one factor vector with its scale mixed out.

    Returns ``(df, location, scale)``.
    """
    y = np.asarray(y, dtype=float)
    loadings = np.atleast_2d(np.asarray(loadings, dtype=float))
    error_precisions = np.asarray(error_precisions, dtype=float)
    if y.ndim != 1 or loadings.shape[0] != y.shape[0] or error_precisions.shape != y.shape:
        raise StructuralError("y, loadings and error precisions have inconsistent shapes")
    df, M, mult, chol = eta_conditional_batch(y[None, :], loadings, error_precisions, nu)
    k = loadings.shape[1]
    cov = cho_solve((chol, True), np.eye(k), check_finite=False)
    cov = 0.5 * (cov + cov.T)
    return df, M[0], mult[0] * cov


def check_symmetric(a: np.ndarray, tol: float = 1e-8, what: str = "matrix") -> None:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise StructuralError(f"{what} must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > tol * scale:
        raise ParameterError(f"{what} is not symmetric")


def covariance_factor(config: SamplerConfig) -> float:
    """Multiplier turning the scale matrix into the covariance of y."""
    if config.likelihood == "t":
        return config.nu / (config.nu - 2.0)
    return 1.0


def credible_interval(values: Sequence[int], level: float = 0.95) -> tuple[int, int]:
    """Equal-tailed interval whose endpoints are attained values."""
    v = np.asarray(values)
    alpha = 0.5 * (1.0 - level)
    lo = int(np.quantile(v, alpha, method="lower"))
    hi = int(np.quantile(v, 1.0 - alpha, method="higher"))
    return lo, hi
