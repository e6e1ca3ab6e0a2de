"""Two-class discriminant analysis with factor-model covariance estimates."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from . import checkpoint
from .chain import run_chain
from .errors import ChainError, ParameterError, StructuralError
from .model import Dataset, SamplerConfig, cholesky, t_log_density

DEFAULT_NU = 5.0


@dataclass(frozen=True)
class ClassifierModel:
    """Class means, posterior-mean t scale matrices and the decision threshold.

    Label 1 is predicted when the log likelihood ratio of class 1 over class 0
    exceeds ``threshold``.
    """

    mean0: np.ndarray
    mean1: np.ndarray
    scale0: np.ndarray
    scale1: np.ndarray
    nu: float = DEFAULT_NU
    threshold: float = 0.0
    k_intervals: tuple = field(default=((0, 0), (0, 0)), compare=False)

    def __post_init__(self):
        p = len(self.mean0)
        for name in ("mean1", "scale0", "scale1"):
            arr = np.asarray(getattr(self, name))
            expected = (p,) if name == "mean1" else (p, p)
            if arr.shape != expected:
                raise StructuralError(f"{name} has shape {arr.shape}, expected {expected}")
        if not self.nu > 0:
            raise ParameterError("nu must be positive")

    @property
    def p(self) -> int:
        return len(self.mean0)

    def with_threshold(self, threshold: float) -> "ClassifierModel":
        return dataclasses.replace(self, threshold=float(threshold))


def classifier_config(**overrides) -> SamplerConfig:
    """Sampler settings used for discriminant analysis unless overridden."""
    base = dict(nu=DEFAULT_NU, nuts_step_size=0.2)
    base.update(overrides)
    return SamplerConfig(**base)


def _as_matrix(data) -> np.ndarray:
    return np.asarray(getattr(data, "observations", data), dtype=float)


def fit(class0_data, class1_data, config: Optional[SamplerConfig] = None,
        threshold: float = 0.0) -> ClassifierModel:
    """Estimate each class covariance with an independent chain on centred data."""
    config = config or classifier_config()
    Y0, Y1 = _as_matrix(class0_data), _as_matrix(class1_data)
    if Y0.ndim != 2 or Y1.ndim != 2 or Y0.shape[1] != Y1.shape[1]:
        raise StructuralError(f"class data shapes {Y0.shape} and {Y1.shape} are incompatible")
    for label, Y in ((0, Y0), (1, Y1)):
        if Y.shape[0] < 2:
            raise ParameterError(f"class {label} needs at least 2 observations, got {Y.shape[0]}")
    seeds = [int(c.generate_state(1, np.uint32)[0])
             for c in np.random.SeedSequence(config.seed).spawn(2)]
    means, scales, intervals = [], [], []
    for label, Y, seed in ((0, Y0, seeds[0]), (1, Y1, seeds[1])):
        mu = Y.mean(axis=0)
        try:
            summary = run_chain(Dataset(Y - mu, source_tag=f"class-{label}"),
                                dataclasses.replace(config, seed=seed))
        except ChainError as exc:
            raise ChainError(f"class {label}: {exc}", exc.iteration, exc.checkpoint) from exc
        means.append(mu)
        scales.append(summary.mean_scale)
        intervals.append(summary.k_credible_interval)
    return ClassifierModel(means[0], means[1], scales[0], scales[1], nu=config.nu,
                           threshold=threshold, k_intervals=tuple(intervals))


def log_likelihood_ratio(y, model: ClassifierModel) -> float:
    """log t(y; nu, mean1, scale1) - log t(y; nu, mean0, scale0)."""
    return (t_log_density(y, model.nu, model.mean1, model.scale1)
            - t_log_density(y, model.nu, model.mean0, model.scale0))


def _t_log_density_rows(Y, nu, mu, scale):
    p = Y.shape[1]
    chol = cholesky(scale, "class scale matrix")
    z = solve_triangular(chol, (Y - mu).T, lower=True, check_finite=False)
    q = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    const = gammaln(0.5 * (nu + p)) - gammaln(0.5 * nu) - 0.5 * p * math.log(nu * math.pi)
    return const - 0.5 * logdet - 0.5 * (nu + p) * np.log1p(q / nu)


def scores(Y, model: ClassifierModel) -> np.ndarray:
    """Log likelihood ratios for every row of ``Y``."""
    Y = np.atleast_2d(_as_matrix(Y))
    if Y.shape[1] != model.p:
        raise StructuralError(f"test rows have {Y.shape[1]} columns, model expects {model.p}")
    return (_t_log_density_rows(Y, model.nu, model.mean1, model.scale1)
            - _t_log_density_rows(Y, model.nu, model.mean0, model.scale0))


def classify(y, model: ClassifierModel) -> int:
    return int(log_likelihood_ratio(y, model) > model.threshold)


def predict(Y, model: ClassifierModel) -> np.ndarray:
    return (scores(Y, model) > model.threshold).astype(int)


def evaluate(predictions, truth) -> dict:
    """Accuracy, sensitivity (true positive rate) and specificity (true negative rate)."""
    pred = np.asarray(predictions).astype(int)
    true = np.asarray(truth).astype(int)
    if pred.shape != true.shape:
        raise StructuralError("predictions and truth differ in length")
    positives = true == 1
    if positives.all() or not positives.any():
        raise ParameterError("truth labels must contain both classes")
    tp = np.sum(pred[positives] == 1)
    tn = np.sum(pred[~positives] == 0)
    return {
        "accuracy": float(tp + tn) / true.size,
        "sensitivity": float(tp) / positives.sum(),
        "specificity": float(tn) / (~positives).sum(),
    }


def save_model(path, model: ClassifierModel):
    entries = {
        "mean0": model.mean0, "mean1": model.mean1,
        "scale0": model.scale0, "scale1": model.scale1,
        "nu": np.float64(model.nu), "threshold": np.float64(model.threshold),
        "k_intervals": np.asarray(model.k_intervals, dtype=np.int64),
    }
    return checkpoint.write(path, checkpoint.KIND_CLASSIFIER, entries)


def load_model(path) -> ClassifierModel:
    kind, e = checkpoint.read(path)
    if kind != checkpoint.KIND_CLASSIFIER:
        raise ParameterError(f"{path} does not hold a classifier")
    return ClassifierModel(e["mean0"], e["mean1"], e["scale0"], e["scale1"],
                           nu=float(e["nu"]), threshold=float(e["threshold"]),
                           k_intervals=tuple(map(tuple, e["k_intervals"].tolist())))
