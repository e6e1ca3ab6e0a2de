"""Reference formulas written independently of the package, entry by entry."""

import numpy as np


def residual(state, Y, i, j):
    return Y[i, j] - sum(state.loadings[j, h] * state.factors[i, h] for h in range(state.loadings.shape[1]))


def error_precision_oracle(state, Y, a_sigma, b_sigma):
    n, p = Y.shape
    shape = a_sigma + n / 2.0
    rate = np.array([b_sigma + 0.5 * sum(state.gamma[i] * residual(state, Y, i, j) ** 2
                                         for i in range(n)) for j in range(p)])
    return shape, rate


def gamma_oracle(state, Y, nu):
    n, p = Y.shape
    k = state.loadings.shape[1]
    shape = (nu + p + k) / 2.0
    rate = np.array([0.5 * (nu
                            + sum(state.error_precisions[j] * residual(state, Y, i, j) ** 2
                                  for j in range(p))
                            + sum(state.factors[i, h] ** 2 for h in range(k)))
                     for i in range(n)])
    return shape, rate


def local_shrinkage_oracle(state, kappa):
    p, k = state.loadings.shape
    tau = [np.prod(state.delta[:h + 1]) for h in range(k)]
    rate = np.array([[0.5 * (kappa + tau[h] * state.loadings[j, h] ** 2) for h in range(k)]
                     for j in range(p)])
    return (kappa + 1.0) / 2.0, rate


def delta_oracle(delta, h, phi, loadings, a1, a2):
    """Shape and rate of delta_h (0-based) with every other increment held fixed."""
    p, k = loadings.shape
    shape = (a1 if h == 0 else a2) + p * (k - h) / 2.0
    rate = 1.0
    for l in range(h, k):
        tau_excl = np.prod([delta[m] for m in range(l + 1) if m != h])
        rate += 0.5 * tau_excl * sum(phi[j, l] * loadings[j, l] ** 2 for j in range(p))
    return shape, rate


def delta_log_conditional(x, delta, h, phi, loadings, a1, a2):
    """Unnormalised log density of delta_h from the prior times the loading terms."""
    p, k = loadings.shape
    a = a1 if h == 0 else a2
    d = np.array(delta, dtype=float)
    d[h] = x
    out = (a - 1.0) * np.log(x) - x
    for l in range(h, k):
        tau = np.prod(d[:l + 1])
        for j in range(p):
            out += 0.5 * np.log(phi[j, l] * tau) - 0.5 * phi[j, l] * tau * loadings[j, l] ** 2
    return out


def loading_row_oracle(state, Y, j):
    """Mean and covariance of row j of the loadings by dense inversion."""
    n = Y.shape[0]
    k = state.loadings.shape[1]
    tau = np.cumprod(state.delta)
    prec = np.diag(state.local_shrinkage[j] * tau)
    lin = np.zeros(k)
    s = state.error_precisions[j]
    for i in range(n):
        eta = state.factors[i]
        prec = prec + s * state.gamma[i] * np.outer(eta, eta)
        lin = lin + s * state.gamma[i] * Y[i, j] * eta
    cov = np.linalg.inv(prec)
    return cov @ lin, cov


def eta_two_stage(y, loadings, error_precisions, nu, size, rng):
    """Scale mixture draws: gamma given y with eta integrated out, then eta given gamma."""
    p, k = loadings.shape
    omega = loadings @ loadings.T + np.diag(1.0 / error_precisions)
    quad = y @ np.linalg.solve(omega, y)
    g = rng.gamma((nu + p) / 2.0, 2.0 / (nu + quad), size=size)
    P = np.eye(k) + loadings.T @ np.diag(error_precisions) @ loadings
    cov = np.linalg.inv(P)
    m = cov @ loadings.T @ (error_precisions * y)
    z = rng.multivariate_normal(np.zeros(k), cov, size=size)
    return m + z / np.sqrt(g)[:, None]
