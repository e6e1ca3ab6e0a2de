"""Full-conditional updates of one posterior sweep.

Each function takes the current :class:`~rsbfm.model.ModelState` and returns
the newly drawn block without mutating the state; the chain driver writes
the results back in sweep order.  Gamma distributions are shape/rate.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtri

from .errors import NumericalError
from .model import ModelState, cholesky
from .rng import gamma_draw

A1_LOWER = 2.0
A2_LOWER = 3.0


def _observations(data) -> np.ndarray:
    return np.asarray(getattr(data, "observations", data), dtype=float)


def loadings_precision(state: ModelState, data):
    """Row-wise posterior precisions (p, k, k) and linear terms (p, k) for the loadings."""
    Y = _observations(data)
    eta = state.factors
    s = state.error_precisions
    weighted = eta * state.gamma[:, None]
    G = eta.T @ weighted
    G = 0.5 * (G + G.T)
    prior = state.local_shrinkage * state.tau[None, :]
    prec = s[:, None, None] * G[None, :, :]
    idx = np.arange(state.k)
    prec[:, idx, idx] += prior
    lin = (weighted.T @ Y).T * s[:, None]
    return prec, lin


def update_loadings(state: ModelState, data, rng) -> np.ndarray:
    """Draw every loading row from its Gaussian conditional.

    Row j has precision ``s_j * sum_i gamma_i eta_i eta_i' + diag(phi_j * tau)``
    and mean ``precision^-1 * s_j * sum_i gamma_i y_ij eta_i``.
    """
    prec, lin = loadings_precision(state, data)
    p, k = state.loadings.shape
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        for j in range(p):
            try:
                cholesky(prec[j])
            except NumericalError:
                raise NumericalError(f"loading precision of row {j} is not positive definite",
                                     index=j) from None
        raise
    z = rng.standard_normal((p, k))
    w = np.linalg.solve(L, lin[:, :, None])[:, :, 0]
    return np.linalg.solve(np.swapaxes(L, 1, 2), (w + z)[:, :, None])[:, :, 0]


def error_precision_params(state: ModelState, data, a_sigma, b_sigma):
    Y = _observations(data)
    resid = Y - state.factors @ state.loadings.T
    shape = a_sigma + 0.5 * Y.shape[0]
    rate = b_sigma + 0.5 * (state.gamma @ (resid * resid))
    return shape, rate


def update_error_precisions(state: ModelState, data, rng, a_sigma, b_sigma) -> np.ndarray:
    shape, rate = error_precision_params(state, data, a_sigma, b_sigma)
    return gamma_draw(rng, shape, rate)


def gamma_params(state: ModelState, data, nu):
    Y = _observations(data)
    p, k = state.loadings.shape
    resid = Y - state.factors @ state.loadings.T
    quad = (resid * resid) @ state.error_precisions + np.sum(state.factors ** 2, axis=1)
    return 0.5 * (nu + p + k), 0.5 * (nu + quad)


def update_gamma(state: ModelState, data, rng, nu) -> np.ndarray:
    """Mixture scales given the freshly drawn factors.

    Must follow the factor update of the same sweep: together they draw
    (eta_i, gamma_i) from their joint conditional.
    """
    shape, rate = gamma_params(state, data, nu)
    return gamma_draw(rng, shape, rate)


def local_shrinkage_params(state: ModelState, kappa):
    shape = 0.5 * (kappa + 1.0)
    rate = 0.5 * (kappa + state.tau[None, :] * state.loadings ** 2)
    return shape, rate


def update_local_shrinkage(state: ModelState, rng, kappa) -> np.ndarray:
    shape, rate = local_shrinkage_params(state, kappa)
    return gamma_draw(rng, shape, rate)


def delta_params(delta, h, local_shrinkage, loadings, a1, a2):
    """Shape and rate of delta_h given the other increments.

    The column precisions entering the rate exclude delta_h itself, which
    is what makes the conditional a gamma density.
    """
    p, k = loadings.shape
    col = np.sum(local_shrinkage * loadings ** 2, axis=0)
    others = delta.copy()
    others[h] = 1.0
    tau_excl = np.cumprod(others)
    rate = 1.0 + 0.5 * float(np.sum(tau_excl[h:] * col[h:]))
    shape = (a1 if h == 0 else a2) + 0.5 * p * (k - h)
    return shape, rate


def update_delta(state: ModelState, rng) -> np.ndarray:
    """Sequential draws of delta_1..delta_k, each using the latest values of the others."""
    delta = state.delta.copy()
    for h in range(state.k):
        shape, rate = delta_params(delta, h, state.local_shrinkage, state.loadings,
                                   state.a1, state.a2)
        delta[h] = gamma_draw(rng, shape, rate)
    return delta


def log_target_a1(a1, delta):
    if a1 <= A1_LOWER:
        return -np.inf
    return math.log(a1) - a1 + (a1 - 1.0) * math.log(delta[0]) - gammaln(a1)


def log_target_a2(a2, delta):
    if a2 <= A2_LOWER:
        return -np.inf
    tail = delta[1:]
    return (math.log(a2) - a2 + (a2 - 1.0) * float(np.sum(np.log(tail)))
            - tail.size * gammaln(a2))


def truncated_normal_proposal(current, sd, lower, rng):
    """Normal draw centred at ``current`` restricted to (lower, inf).

    Returns the proposal and the log Hastings correction
    log q(current | proposal) - log q(proposal | current).
    """
    lo = (lower - current) / sd
    v = 1.0 - rng.random()
    z = -ndtri(v * math.exp(log_ndtr(-lo)))
    proposal = current + sd * z
    correction = log_ndtr((current - lower) / sd) - log_ndtr((proposal - lower) / sd)
    return proposal, correction


def _mh(current, sd, lower, log_target, rng):
    proposal, correction = truncated_normal_proposal(current, sd, lower, rng)
    u = 1.0 - rng.random()
    if not proposal > lower:
        return current, False
    log_ratio = log_target(proposal) - log_target(current) + correction
    if math.log(u) < log_ratio:
        return float(proposal), True
    return current, False


def update_a1_a2(state: ModelState, rng, mh_sd_a1, mh_sd_a2):
    """Metropolis-Hastings moves for a1 > 2 and a2 > 3.

    Returns ``(a1, a2, accepted_a1, accepted_a2)``.  With k = 1 the a2 target
    is its truncated Ga(2, 1) prior.
    """
    delta = state.delta
    a1, acc1 = _mh(state.a1, mh_sd_a1, A1_LOWER, lambda a: log_target_a1(a, delta), rng)
    a2, acc2 = _mh(state.a2, mh_sd_a2, A2_LOWER, lambda a: log_target_a2(a, delta), rng)
    return a1, a2, acc1, acc2
