"""Stochastic truncation of the number of factors during sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .model import ModelState
from .rng import gamma_draw

log = logging.getLogger(__name__)


@dataclass
class AdaptationPolicy:
    intercept: float = -1.2
    slope: float = -0.0004
    threshold: float = 0.01
    proportion: float = 0.7
    min_k: int = 1
    max_k: int = 50

    def __post_init__(self):
        if not self.threshold > 0:
            raise ParameterError("threshold must be positive")
        if not 0 < self.proportion < 1:
            raise ParameterError("proportion must lie in (0, 1)")
        if not 1 <= self.min_k <= self.max_k:
            raise ParameterError(f"need 1 <= min_k <= max_k, got {self.min_k}, {self.max_k}")

    def probability(self, t) -> float:
        return math.exp(self.intercept + self.slope * t)

    @classmethod
    def from_config(cls, config, max_k: int) -> "AdaptationPolicy":
        return cls(intercept=config.adapt_intercept, slope=config.adapt_slope,
                   threshold=config.trunc_threshold, proportion=config.trunc_proportion,
                   min_k=config.min_k, max_k=max_k)


@dataclass
class AdaptationEvent:
    iteration: int
    action: str  # "none", "remove" or "add"
    k_before: int
    k_after: int
    columns: list = field(default_factory=list)

    def log_line(self) -> str:
        cols = ",".join(str(c) for c in self.columns) or "-"
        return f"{self.iteration} {self.action} {self.k_before} {self.k_after} {cols}"


def flag_columns(loadings, threshold, proportion) -> np.ndarray:
    """Columns whose share of entries below ``threshold`` in magnitude reaches ``proportion``."""
    small = np.abs(loadings) < threshold
    return small.mean(axis=0) >= proportion


def adapt(state: ModelState, iteration: int, policy: AdaptationPolicy, rng, kappa: float = 3.0):
    """Possibly prune negligible loading columns or append a prior-drawn one.

    With probability ``policy.probability(iteration)`` the loadings are
    inspected.  Flagged columns are removed together with the matching factor,
    local-shrinkage and delta entries; when nothing is flagged and
    ``k < max_k`` a new column is drawn from the prior at the current
    hyperparameters.  Returns ``(state, event)``; on the no-op branch the very
    same state object comes back.
    """
    k = state.k
    if rng.random() >= policy.probability(iteration):
        return state, AdaptationEvent(iteration, "none", k, k)

    flagged = flag_columns(state.loadings, policy.threshold, policy.proportion)
    if flagged.any():
        keep = ~flagged
        shortfall = policy.min_k - int(keep.sum())
        if shortfall > 0:
            norms = np.sum(state.loadings ** 2, axis=0)
            candidates = np.flatnonzero(flagged)
            rescue = candidates[np.argsort(-norms[candidates], kind="stable")[:shortfall]]
            keep[rescue] = True
        removed = np.flatnonzero(~keep)
        if removed.size == 0:
            return state, AdaptationEvent(iteration, "none", k, k)
        new = ModelState(
            loadings=state.loadings[:, keep].copy(),
            error_precisions=state.error_precisions.copy(),
            factors=state.factors[:, keep].copy(),
            gamma=state.gamma.copy(),
            local_shrinkage=state.local_shrinkage[:, keep].copy(),
            delta=state.delta[keep].copy(),
            a1=state.a1,
            a2=state.a2,
        )
        event = AdaptationEvent(iteration, "remove", k, new.k, removed.tolist())
        log.debug("adaptation %s", event.log_line())
        return new, event

    if k >= policy.max_k:
        return state, AdaptationEvent(iteration, "none", k, k)

    p = state.loadings.shape[0]
    n = state.factors.shape[0]
    delta_new = float(gamma_draw(rng, state.a2, 1.0))
    tau_new = float(state.tau[-1]) * delta_new if k else delta_new
    phi_new = gamma_draw(rng, 0.5 * kappa, 0.5 * kappa * np.ones(p))
    lam_new = rng.standard_normal(p) / np.sqrt(phi_new * tau_new)
    eta_new = rng.standard_normal(n)
    new = ModelState(
        loadings=np.column_stack([state.loadings, lam_new]),
        error_precisions=state.error_precisions.copy(),
        factors=np.column_stack([state.factors, eta_new]),
        gamma=state.gamma.copy(),
        local_shrinkage=np.column_stack([state.local_shrinkage, phi_new]),
        delta=np.append(state.delta, delta_new),
        a1=state.a1,
        a2=state.a2,
    )
    event = AdaptationEvent(iteration, "add", k, k + 1, [k])
    log.debug("adaptation %s", event.log_line())
    return new, event
