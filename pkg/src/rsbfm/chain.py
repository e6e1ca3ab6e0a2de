"""Chain driver: sweep orchestration, sample accumulation and checkpointing."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import gammaln

from . import checkpoint
from .adaptation import AdaptationEvent, AdaptationPolicy, adapt
from .errors import ChainError, NumericalError, ParameterError
from .model import (Dataset, ModelState, PosteriorSummary, SamplerConfig, covariance_factor,
                    credible_interval, reconstruct_covariance)
from .nuts import FactorUpdateStats, update_factors
from .rng import StreamFactory, Update, gamma_draw
from .updates import (update_a1_a2, update_delta, update_error_precisions, update_gamma,
                      update_loadings, update_local_shrinkage)

log = logging.getLogger(__name__)

INITIAL_A1 = 2.1
INITIAL_A2 = 3.1
MH_TARGET_ACCEPT = 0.6


@dataclass
class SweepDiagnostics:
    iteration: int
    k: int
    mh_accept_a1: bool
    mh_accept_a2: bool
    nuts_divergences: int
    log_posterior_unnormalized: float
    nuts_accept_stat: float = float("nan")


def initial_state(n: int, p: int, k: int, config: SamplerConfig, rng) -> ModelState:
    """Draw a starting point from the prior, with gamma fixed at one."""
    a1, a2 = INITIAL_A1, INITIAL_A2
    delta = np.empty(k)
    delta[0] = gamma_draw(rng, a1, 1.0)
    if k > 1:
        delta[1:] = gamma_draw(rng, a2, np.ones(k - 1))
    phi = gamma_draw(rng, 0.5 * config.kappa, 0.5 * config.kappa * np.ones((p, k)))
    loadings = rng.standard_normal((p, k)) / np.sqrt(phi * np.cumprod(delta)[None, :])
    sigma = gamma_draw(rng, config.a_sigma, config.b_sigma * np.ones(p))
    factors = rng.standard_normal((n, k))
    return ModelState(loadings=loadings, error_precisions=sigma, factors=factors,
                      gamma=np.ones(n), local_shrinkage=phi, delta=delta, a1=a1, a2=a2)


def _gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    return float(np.sum(shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x))


def log_posterior(state: ModelState, Y: np.ndarray, config: SamplerConfig) -> float:
    """Unnormalized log joint density of data, latent variables and parameters."""
    n, p = Y.shape
    k = state.k
    s = state.error_precisions
    g = state.gamma
    resid = Y - state.factors @ state.loadings.T
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)
    lp = (0.5 * p * np.sum(np.log(g)) + 0.5 * n * np.sum(np.log(s))
          - 0.5 * float(g @ ((resid * resid) @ s)) - n * p * half_log_2pi)
    lp += 0.5 * k * np.sum(np.log(g)) - 0.5 * float(g @ np.sum(state.factors ** 2, axis=1)) \
        - n * k * half_log_2pi
    if config.likelihood == "t":
        lp += _gamma_logpdf(g, 0.5 * config.nu, 0.5 * config.nu)
    prec = state.local_shrinkage * state.tau[None, :]
    lp += 0.5 * np.sum(np.log(prec)) - 0.5 * np.sum(prec * state.loadings ** 2) - p * k * half_log_2pi
    lp += _gamma_logpdf(state.local_shrinkage, 0.5 * config.kappa, 0.5 * config.kappa)
    lp += _gamma_logpdf(state.delta[:1], state.a1, 1.0)
    lp += _gamma_logpdf(state.delta[1:], state.a2, 1.0)
    lp += _gamma_logpdf([state.a1, state.a2], 2.0, 1.0)
    lp += _gamma_logpdf(s, config.a_sigma, config.b_sigma)
    return float(lp)


def sweep(state: ModelState, Y: np.ndarray, config: SamplerConfig, streams: StreamFactory,
          t: int, mh_sd: tuple, policy: Optional[AdaptationPolicy] = None):
    """Run one full sweep at iteration ``t`` and return ``(state, diagnostics, event)``.

    The input state is not modified.
    """
    state = state.copy()
    state.loadings = update_loadings(state, Y, streams.stream(t, Update.LOADINGS))
    state.error_precisions = update_error_precisions(
        state, Y, streams.stream(t, Update.ERROR_PRECISIONS), config.a_sigma, config.b_sigma)
    stats = FactorUpdateStats()
    state.factors = update_factors(state, Y, config, streams.stream(t, Update.FACTORS), stats)
    if config.likelihood == "t":
        state.gamma = update_gamma(state, Y, streams.stream(t, Update.GAMMA), config.nu)
    state.local_shrinkage = update_local_shrinkage(
        state, streams.stream(t, Update.LOCAL_SHRINKAGE), config.kappa)
    state.delta = update_delta(state, streams.stream(t, Update.DELTA))
    state.a1, state.a2, acc1, acc2 = update_a1_a2(
        state, streams.stream(t, Update.HYPER), mh_sd[0], mh_sd[1])
    event = None
    if config.adapt and policy is not None:
        state, event = adapt(state, t, policy, streams.stream(t, Update.ADAPT), config.kappa)
    diag = SweepDiagnostics(
        iteration=t, k=state.k, mh_accept_a1=acc1, mh_accept_a2=acc2,
        nuts_divergences=stats.divergences,
        log_posterior_unnormalized=log_posterior(state, Y, config),
        nuts_accept_stat=stats.mean_accept)
    return state, diag, event


class _Accumulator:
    """Everything a run carries between sweeps, in checkpointable form."""

    def __init__(self, p, tracked, keep_samples):
        self.cov_sum = np.zeros((p, p))
        self.n_kept = 0
        self.tracked = [tuple(int(v) for v in e) for e in tracked]
        self.tracked_samples = []
        self.keep_samples = keep_samples
        self.samples = []
        self.diag = []
        self.events = []

    def add(self, omega):
        self.cov_sum += omega
        self.n_kept += 1
        if self.tracked:
            rows, cols = zip(*self.tracked)
            self.tracked_samples.append(omega[list(rows), list(cols)])
        if self.keep_samples:
            self.samples.append(omega)

    def tracked_array(self):
        if not self.tracked:
            return np.zeros((self.n_kept, 0))
        return np.asarray(self.tracked_samples, dtype=float)


_DIAG_FIELDS = [f.name for f in dataclasses.fields(SweepDiagnostics)]
_EVENT_CODES = {"remove": 1, "add": 2}


# Settings that change scheduling or output only; a resumed run may differ in these
_SCHEDULING_KEYS = ("checkpoint_dir", "checkpoint_every", "parallel", "progress_every")


def _checkpoint_entries(state, next_iteration, mh_sd, acc: _Accumulator, config):
    p = state.loadings.shape[0]
    diag = np.array([[getattr(d, f) for f in _DIAG_FIELDS] for d in acc.diag],
                    dtype=float).reshape(-1, len(_DIAG_FIELDS))
    events = np.array([[e.iteration, _EVENT_CODES[e.action], e.k_before, e.k_after]
                       for e in acc.events], dtype=np.int64).reshape(-1, 4)
    # scheduling settings do not change results and are left out
    saved = {k: v for k, v in dataclasses.asdict(config).items() if k not in _SCHEDULING_KEYS}
    entries = {
        "config": json.dumps(saved, sort_keys=True),
        "next_iteration": np.int64(next_iteration),
        "seed": np.int64(config.seed),
        "loadings": state.loadings,
        "error_precisions": state.error_precisions,
        "factors": state.factors,
        "gamma": state.gamma,
        "local_shrinkage": state.local_shrinkage,
        "delta": state.delta,
        "a1": np.float64(state.a1),
        "a2": np.float64(state.a2),
        "mh_sd": np.asarray(mh_sd, dtype=float),
        "cov_sum": acc.cov_sum,
        "n_kept": np.int64(acc.n_kept),
        "tracked": np.asarray(acc.tracked, dtype=np.int64).reshape(-1, 2),
        "tracked_samples": acc.tracked_array(),
        "diagnostics": diag,
        "events": events,
        "event_columns": json.dumps([list(e.columns) for e in acc.events]),
    }
    if acc.keep_samples:
        entries["covariance_samples"] = np.asarray(acc.samples, dtype=float).reshape(-1, p, p)
    return entries


def _check_resume_config(entries, config):
    saved = json.loads(entries["config"])
    current = json.loads(json.dumps(dataclasses.asdict(config)))
    diff = sorted(k for k in set(saved) | set(current)
                  if k not in _SCHEDULING_KEYS and saved.get(k) != current.get(k))
    if diff:
        raise ParameterError(f"checkpoint was written with different settings: {', '.join(diff)}")


def _restore(entries, config, p):
    _check_resume_config(entries, config)
    state = ModelState(
        loadings=entries["loadings"], error_precisions=entries["error_precisions"],
        factors=entries["factors"], gamma=entries["gamma"],
        local_shrinkage=entries["local_shrinkage"], delta=entries["delta"],
        a1=float(entries["a1"]), a2=float(entries["a2"]))
    keep = "covariance_samples" in entries
    acc = _Accumulator(p, entries["tracked"].tolist(), keep)
    acc.cov_sum = entries["cov_sum"]
    acc.n_kept = int(entries["n_kept"])
    acc.tracked_samples = list(entries["tracked_samples"])
    if keep:
        acc.samples = list(entries["covariance_samples"])
    for row in entries["diagnostics"]:
        values = dict(zip(_DIAG_FIELDS, row))
        acc.diag.append(SweepDiagnostics(
            iteration=int(values["iteration"]), k=int(values["k"]),
            mh_accept_a1=bool(values["mh_accept_a1"]), mh_accept_a2=bool(values["mh_accept_a2"]),
            nuts_divergences=int(values["nuts_divergences"]),
            log_posterior_unnormalized=float(values["log_posterior_unnormalized"]),
            nuts_accept_stat=float(values["nuts_accept_stat"])))
    names = {v: k for k, v in _EVENT_CODES.items()}
    columns = json.loads(entries.get("event_columns", "[]")) or [[]] * len(entries["events"])
    for (it, code, kb, ka), cols in zip(entries["events"], columns):
        acc.events.append(AdaptationEvent(int(it), names[int(code)], int(kb), int(ka), cols))
    return state, int(entries["next_iteration"]), tuple(entries["mh_sd"]), acc


def load_checkpoint(path):
    kind, entries = checkpoint.read(path)
    if kind != checkpoint.KIND_CHAIN:
        raise ParameterError(f"{path} is not a chain checkpoint")
    return entries


def run_chain(data: Dataset, config: SamplerConfig, resume_from=None) -> PosteriorSummary:
    """Run the sampler and summarise the retained covariance draws.

    Sweeps ``1..n_burnin`` are discarded; afterwards every ``thin``-th
    covariance is accumulated.  Output depends only on (data, config): the
    ``parallel`` flag changes scheduling, not results.  ``resume_from`` names
    a checkpoint written by an earlier run with the same config.
    """
    config.validate()
    if not isinstance(data, Dataset):
        data = Dataset(np.asarray(data, dtype=float))
    Y = data.observations
    n, p = Y.shape
    k0, max_k = config.resolved_k(p)
    policy = AdaptationPolicy.from_config(config, max_k) if config.adapt else None
    streams = StreamFactory(config.seed)
    keep_samples = config.keep_covariance_samples and p <= config.covariance_sample_cap
    for i, j in config.tracked_entries:
        if not (0 <= i < p and 0 <= j < p):
            raise ParameterError(f"tracked entry ({i}, {j}) outside a {p} x {p} matrix")

    if resume_from is not None:
        state, t_start, mh_sd, acc = _restore(load_checkpoint(resume_from), config, p)
        if state.loadings.shape[0] != p or state.factors.shape[0] != n:
            raise ParameterError("checkpoint dimensions do not match the data")
    else:
        state = initial_state(n, p, k0, config, streams.stream(0, Update.INIT))
        t_start = 1
        mh_sd = (float(config.mh_sd_a1), float(config.mh_sd_a2))
        acc = _Accumulator(p, config.tracked_entries, keep_samples)

    cov_factor = covariance_factor(config)
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    last_ckpt = None
    started = time.perf_counter()
    for t in range(t_start, config.n_iterations + 1):
        try:
            new_state, diag, event = sweep(state, Y, config, streams, t, mh_sd, policy)
            omega = None
            if t > config.n_burnin and (t - config.n_burnin) % config.thin == 0:
                omega = reconstruct_covariance(new_state.loadings, new_state.error_precisions)
                omega *= cov_factor
            if not np.isfinite(diag.log_posterior_unnormalized):
                raise NumericalError("log posterior is not finite")
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            ref = last_ckpt
            if ckpt_dir is not None:
                ref = checkpoint.write(ckpt_dir / "failure.rsbf", checkpoint.KIND_CHAIN,
                                       _checkpoint_entries(state, t, mh_sd, acc, config))
            raise ChainError(f"sweep {t} failed: {exc}", iteration=t, checkpoint=ref) from exc
        state = new_state
        if config.tune_mh and t <= config.n_burnin:
            rate = t ** -0.6
            mh_sd = (mh_sd[0] * math.exp(rate * (diag.mh_accept_a1 - MH_TARGET_ACCEPT)),
                     mh_sd[1] * math.exp(rate * (diag.mh_accept_a2 - MH_TARGET_ACCEPT)))
        acc.diag.append(diag)
        if event is not None and event.action != "none":
            acc.events.append(event)
        if omega is not None:
            acc.add(omega)
        if ckpt_dir is not None and t % config.checkpoint_every == 0:
            last_ckpt = checkpoint.write(ckpt_dir / "checkpoint.rsbf", checkpoint.KIND_CHAIN,
                                         _checkpoint_entries(state, t + 1, mh_sd, acc, config))
        if config.progress_every and t % config.progress_every == 0:
            log.info("sweep %d/%d k=%d logpost=%.3f", t, config.n_iterations, state.k,
                     diag.log_posterior_unnormalized)
    elapsed = time.perf_counter() - started
    if ckpt_dir is not None:
        checkpoint.write(ckpt_dir / "final.rsbf", checkpoint.KIND_CHAIN,
                         _checkpoint_entries(state, config.n_iterations + 1, mh_sd, acc, config))

    k_trace = np.array([d.k for d in acc.diag], dtype=np.int64)
    post = [d for d in acc.diag if d.iteration > config.n_burnin]
    rates = {
        "a1": float(np.mean([d.mh_accept_a1 for d in post])),
        "a2": float(np.mean([d.mh_accept_a2 for d in post])),
        "mh_sd_a1": float(mh_sd[0]),
        "mh_sd_a2": float(mh_sd[1]),
    }
    if config.likelihood == "t" and config.eta_sampler_mode == "nuts":
        rates["nuts_accept_stat"] = float(np.mean([d.nuts_accept_stat for d in post]))
        rates["nuts_divergences"] = float(sum(d.nuts_divergences for d in post))
    mean_cov = acc.cov_sum / acc.n_kept
    mean_cov = 0.5 * (mean_cov + mean_cov.T)
    summary = PosteriorSummary(
        mean_covariance=mean_cov,
        mean_scale=mean_cov / cov_factor,
        covariance_samples=np.asarray(acc.samples) if keep_samples else None,
        tracked_entries=list(acc.tracked),
        tracked_samples=acc.tracked_array(),
        k_trace=k_trace,
        k_credible_interval=credible_interval(k_trace[config.n_burnin:]),
        acceptance_rates=rates,
        elapsed_seconds=elapsed,
        n_samples=acc.n_kept,
        diagnostics=acc.diag,
        final_state=state,
        adaptation_events=acc.events,
    )
    return summary
