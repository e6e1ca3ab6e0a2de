"""No-U-Turn transitions for the latent factor vectors.

Two implementations of the same transition live here:

* :func:`nuts_step` works with arbitrary Python callables and serves as the
  reference;
* a numba kernel specialised to the Student-t factor conditional, used by
  :func:`update_factors` inside the chain.

Both consume randomness in the same order (momentum first, then one uniform
per direction choice, per trajectory leaf after the first in a subtree and
per subtree merge), so feeding them identical draws gives identical
transitions up to floating point rounding.  Trajectory points are selected
multinomially: uniform progressive sampling inside a subtree and biased
progressive sampling when a subtree is merged into the trajectory.  The mass
matrix is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError
from .model import eta_conditional_batch

DIVERGENCE_THRESHOLD = 1000.0


@dataclass
class NutsOutcome:
    new_point: np.ndarray
    tree_depth_reached: int
    diverged: bool
    accept_stat: float
    n_leapfrog: int = 0


def uniform_budget(max_depth: int) -> int:
    """Upper bound on the uniforms one transition can consume."""
    return 2 ** max_depth + max_depth


def leapfrog(x, r, grad, step_size, gradient):
    """One leapfrog step for H(x, r) = -log p(x) + r.r / 2."""
    r_half = r + 0.5 * step_size * grad
    x_new = x + step_size * r_half
    g_new = np.asarray(gradient(x_new), dtype=float)
    return x_new, r_half + 0.5 * step_size * g_new, g_new


def _subtree(x, r, g, step, size, h0, log_density, gradient, rng):
    k = x.shape[0]
    leaves = np.empty((size, k))
    prefix = np.zeros((size + 1, k))
    sample = x
    log_w = -np.inf
    acc = 0.0
    for m in range(1, size + 1):
        x, r, g = leapfrog(x, r, g, step, gradient)
        h = -float(log_density(x)) + 0.5 * float(r @ r)
        if not math.isfinite(h) or h - h0 > DIVERGENCE_THRESHOLD:
            return False, True, (x, r, g), sample, log_w, None, acc, m
        acc += min(1.0, math.exp(min(0.0, h0 - h)))
        lw = h0 - h
        if m == 1:
            sample, log_w = x, lw
        else:
            new_log_w = np.logaddexp(log_w, lw)
            if rng.random() < math.exp(lw - new_log_w):
                sample = x
            log_w = new_log_w
        leaves[m - 1] = r
        prefix[m] = prefix[m - 1] + r
        span = 2
        while span <= size and m % span == 0:
            rho = prefix[m] - prefix[m - span]
            if not (leaves[m - span] @ rho > 0 and leaves[m - 1] @ rho > 0):
                return False, False, (x, r, g), sample, log_w, None, acc, m
            span *= 2
    return True, False, (x, r, g), sample, log_w, prefix[size], acc, size


def nuts_step(current, log_density, gradient, step_size, max_depth, rng) -> NutsOutcome:
    """One NUTS transition from ``current``.

    ``log_density`` and ``gradient`` evaluate the (unnormalized) target and
    its gradient.  A trajectory whose energy error exceeds 1000 is declared
    divergent and its last subtree is discarded.
    """
    x0 = np.atleast_1d(np.asarray(current, dtype=float)).copy()
    k = x0.shape[0]
    logp0 = float(log_density(x0))
    g0 = np.asarray(gradient(x0), dtype=float)
    if not (math.isfinite(logp0) and np.all(np.isfinite(g0))):
        raise NumericalError("log density or gradient is not finite at the current point")
    r0 = rng.standard_normal(k)
    h0 = -logp0 + 0.5 * float(r0 @ r0)

    left = right = (x0, r0, g0)
    sample = x0
    log_w = 0.0
    rho = r0.copy()
    depth = 0
    diverged = False
    acc_sum = 0.0
    n_leapfrog = 0
    for j in range(max_depth):
        forward = rng.random() < 0.5
        start = right if forward else left
        step = step_size if forward else -step_size
        valid, div, end, sub_sample, sub_log_w, sub_rho, acc, n = _subtree(
            *start, step, 2 ** j, h0, log_density, gradient, rng)
        acc_sum += acc
        n_leapfrog += n
        if not valid:
            diverged = div
            break
        if forward:
            right = end
        else:
            left = end
        if rng.random() < math.exp(min(0.0, sub_log_w - log_w)):
            sample = sub_sample
        log_w = np.logaddexp(log_w, sub_log_w)
        rho = rho + sub_rho
        depth = j + 1
        if not (left[1] @ rho > 0 and right[1] @ rho > 0):
            break
    accept = acc_sum / n_leapfrog if n_leapfrog else 0.0
    return NutsOutcome(np.array(sample, copy=True), depth, diverged, accept, n_leapfrog)


# --- numba kernel for the Student-t factor conditional -----------------------

@numba.njit(cache=True)
def _t_eval(x, loc, prec, df, grad):
    k = x.shape[0]
    d = x - loc
    q = 0.0
    for a in range(k):
        s = 0.0
        for b in range(k):
            s += prec[a, b] * d[b]
        grad[a] = s
        q += d[a] * s
    coef = -(df + k) / (df + q)
    for a in range(k):
        grad[a] *= coef
    return -0.5 * (df + k) * math.log1p(q / df)


@numba.njit(cache=True)
def _t_transition(x0, loc, prec, df, step_size, max_depth, mom, unif):
    """Returns (new_point, depth, diverged, accept_stat, status).

    status is 0 on success and 1 when the start point is not finite.
    """
    k = x0.shape[0]
    g0 = np.empty(k)
    logp0 = _t_eval(x0, loc, prec, df, g0)
    if not np.isfinite(logp0) or not np.all(np.isfinite(g0)):
        return x0.copy(), 0, False, 0.0, 1
    r0 = mom.copy()
    h0 = -logp0 + 0.5 * np.dot(r0, r0)

    xl = x0.copy(); rl = r0.copy(); gl = g0.copy()
    xr = x0.copy(); rr = r0.copy(); gr = g0.copy()
    sample = x0.copy()
    log_w = 0.0
    rho = r0.copy()
    depth = 0
    diverged = False
    acc_sum = 0.0
    n_lf = 0
    ui = 0
    half = 2 ** (max_depth - 1) if max_depth > 0 else 1
    leaves = np.empty((half, k))
    prefix = np.zeros((half + 1, k))
    x = np.empty(k); r = np.empty(k); g = np.empty(k)
    sub_sample = np.empty(k)

    for j in range(max_depth):
        forward = unif[ui] < 0.5
        ui += 1
        step = step_size if forward else -step_size
        if forward:
            x[:] = xr; r[:] = rr; g[:] = gr
        else:
            x[:] = xl; r[:] = rl; g[:] = gl
        size = 2 ** j
        sub_log_w = -np.inf
        valid = True
        prefix[0, :] = 0.0
        for m in range(1, size + 1):
            for a in range(k):
                r[a] += 0.5 * step * g[a]
            for a in range(k):
                x[a] += step * r[a]
            logp = _t_eval(x, loc, prec, df, g)
            for a in range(k):
                r[a] += 0.5 * step * g[a]
            n_lf += 1
            h = -logp + 0.5 * np.dot(r, r)
            if not np.isfinite(h) or h - h0 > 1000.0:
                valid = False
                diverged = True
                break
            acc_sum += min(1.0, math.exp(min(0.0, h0 - h)))
            lw = h0 - h
            if m == 1:
                sub_sample[:] = x
                sub_log_w = lw
            else:
                new_log_w = np.logaddexp(sub_log_w, lw)
                if unif[ui] < math.exp(lw - new_log_w):
                    sub_sample[:] = x
                ui += 1
                sub_log_w = new_log_w
            leaves[m - 1, :] = r
            prefix[m, :] = prefix[m - 1, :] + r
            span = 2
            while span <= size and m % span == 0:
                rho_b = prefix[m] - prefix[m - span]
                if not (np.dot(leaves[m - span], rho_b) > 0 and np.dot(leaves[m - 1], rho_b) > 0):
                    valid = False
                    break
                span *= 2
            if not valid:
                break
        if not valid:
            break
        if forward:
            xr[:] = x; rr[:] = r; gr[:] = g
        else:
            xl[:] = x; rl[:] = r; gl[:] = g
        if unif[ui] < math.exp(min(0.0, sub_log_w - log_w)):
            sample[:] = sub_sample
        ui += 1
        log_w = np.logaddexp(log_w, sub_log_w)
        rho += prefix[size]
        depth = j + 1
        if not (np.dot(rl, rho) > 0 and np.dot(rr, rho) > 0):
            break
    accept = acc_sum / n_lf if n_lf > 0 else 0.0
    return sample, depth, diverged, accept, 0


def _batch_body(X, Loc, P, mult, df, step_size, max_depth, Mom, U, out, depth, div, acc, status):
    for i in numba.prange(X.shape[0]):
        prec = P / mult[i]
        x, d, dv, a, st = _t_transition(X[i], Loc[i], prec, df, step_size, max_depth, Mom[i], U[i])
        out[i, :] = x
        depth[i] = d
        div[i] = dv
        acc[i] = a
        status[i] = st


_batch_serial = numba.njit(cache=True)(_batch_body)
_batch_parallel = numba.njit(cache=True, parallel=True)(_batch_body)


def nuts_t_step(current, location, precision, df, step_size, max_depth, momentum, uniforms) -> NutsOutcome:
    """Compiled transition for a Student-t target given explicit random inputs.

    ``precision`` is the inverse of the t scale matrix.  ``uniforms`` must hold
    at least ``uniform_budget(max_depth)`` values.
    """
    x, d, dv, a, st = _t_transition(
        np.ascontiguousarray(current, dtype=float), np.ascontiguousarray(location, dtype=float),
        np.ascontiguousarray(precision, dtype=float), float(df), float(step_size),
        int(max_depth), np.ascontiguousarray(momentum, dtype=float),
        np.ascontiguousarray(uniforms, dtype=float))
    if st:
        raise NumericalError("log density or gradient is not finite at the current point")
    return NutsOutcome(x, int(d), bool(dv), float(a))


@dataclass
class FactorUpdateStats:
    divergences: int = 0
    mean_accept: float = float("nan")
    mean_depth: float = float("nan")


def update_factors(state, data, config, rng, stats: FactorUpdateStats | None = None) -> np.ndarray:
    """Draw new factor vectors for every observation.

    Under the t likelihood each eta_i targets its collapsed Student-t
    conditional, via one NUTS transition (``eta_sampler_mode='nuts'``) or an
    exact draw (``'exact'``).  Under the normal likelihood the conditional is
    Gaussian and is sampled exactly.  Random inputs are drawn as one block
    whose row i belongs to observation i, so parallel execution over
    observations reproduces the serial result.
    """
    Y = np.asarray(getattr(data, "observations", data), dtype=float)
    n = Y.shape[0]
    k = state.k
    if n == 0:
        return state.factors.copy()
    df, M, mult, chol = eta_conditional_batch(Y, state.loadings, state.error_precisions, config.nu)

    if config.likelihood == "normal":
        z = rng.standard_normal((n, k))
        return M + solve_triangular(chol, z.T, lower=True, trans="T", check_finite=False).T

    if config.eta_sampler_mode == "exact":
        z = rng.standard_normal((n, k))
        w = rng.chisquare(df, size=n)
        dev = solve_triangular(chol, z.T, lower=True, trans="T", check_finite=False).T
        return M + dev * np.sqrt(mult * df / w)[:, None]

    depth_max = int(config.nuts_max_depth)
    mom = rng.standard_normal((n, k))
    unif = rng.random((n, uniform_budget(depth_max)))
    P = chol @ chol.T
    out = np.empty((n, k))
    depth = np.empty(n, dtype=np.int64)
    div = np.empty(n, dtype=np.bool_)
    acc = np.empty(n)
    status = np.empty(n, dtype=np.int64)
    kernel = _batch_parallel if config.parallel else _batch_serial
    kernel(np.ascontiguousarray(state.factors), np.ascontiguousarray(M), P,
           np.ascontiguousarray(mult), float(df), float(config.nuts_step_size), depth_max,
           mom, unif, out, depth, div, acc, status)
    bad = np.flatnonzero(status)
    if bad.size:
        raise NumericalError(
            f"factor target not finite at the current point of observation {bad[0]}",
            index=int(bad[0]))
    if stats is not None:
        stats.divergences = int(div.sum())
        stats.mean_accept = float(acc.mean())
        stats.mean_depth = float(depth.mean())
    return out
