"""Logistic-regression classifier fitted by IRLS, plus per-batch metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .drift_env import Batch, ConfigError, sigmoid

CE_CLAMP = 1e-12


class DegenerateBatchError(ValueError):
    """The design matrix is rank deficient, so no unique fit exists."""


@dataclass(frozen=True)
class FitSettings:
    ridge: float = 1e-8
    tol: float = 1e-8
    max_iter: int = 100


@dataclass(frozen=True)
class LogisticModel:
    intercept: float
    weights: np.ndarray
    fit_time_index: int = 1
    converged: bool = True

    @property
    def dim(self) -> int:
        return self.weights.size

    def coefficients(self) -> np.ndarray:
        """Intercept followed by the weights."""
        return np.concatenate([[self.intercept], self.weights])


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    cross_entropy: float


def _design(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _rank_deficient(Z: np.ndarray) -> bool:
    # eigenvalues of the column-scaled Gram matrix; cheaper than an SVD of Z
    gram = Z.T @ Z
    scale = np.sqrt(np.diag(gram))
    if np.any(scale == 0):
        return True
    eig = np.linalg.eigvalsh(gram / np.outer(scale, scale))
    return eig[0] <= Z.shape[1] * np.finfo(float).eps * eig[-1] * 1e3


def fit(batch: Batch, settings: FitSettings = FitSettings()) -> LogisticModel:
    """Ridge-stabilised maximum likelihood via iteratively reweighted least squares.

    Minimises ``-loglik + ridge/2 * ||beta||^2`` with Newton steps and stops
    when the largest parameter change drops below ``settings.tol``.
    """
    if len(batch) < 2:
        raise ConfigError("fitting needs at least two samples")
    Z = _design(batch.covariates)
    y = batch.labels.astype(float)
    if _rank_deficient(Z):
        raise DegenerateBatchError(f"design matrix of shape {Z.shape} is rank deficient")

    k = Z.shape[1]
    beta = np.zeros(k)
    reg = settings.ridge * np.eye(k)
    converged = False
    for _ in range(settings.max_iter):
        p = expit(Z @ beta)
        w = p * (1.0 - p)
        grad = Z.T @ (y - p) - settings.ridge * beta
        H = (Z * w[:, None]).T @ Z + reg
        delta = np.linalg.solve(H, grad)
        beta = beta + delta
        if np.max(np.abs(delta)) < settings.tol:
            converged = True
            break
    if not np.all(np.isfinite(beta)):
        raise DegenerateBatchError("IRLS diverged to non-finite parameters")
    return LogisticModel(float(beta[0]), beta[1:].copy(), batch.time_index, converged)


def predict_proba(model: LogisticModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dim:
        raise ConfigError(f"model expects {model.dim} features, got {X.shape[1]}")
    return sigmoid(model.intercept + X @ model.weights)


def metrics_from_proba(p, y, threshold: float = 0.5) -> MetricSet:
    p = np.asarray(p, dtype=float)
    y = np.asarray(y)
    if y.size == 0:
        raise ConfigError("cannot evaluate on an empty batch")
    pred = p >= threshold
    pos = y == 1
    tp = np.count_nonzero(pred & pos)
    n_pred = np.count_nonzero(pred)
    n_pos = np.count_nonzero(pos)
    accuracy = np.count_nonzero(pred == pos) / y.size
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_pos if n_pos else 0.0
    pc = np.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    ce = -np.mean(np.where(pos, np.log(pc), np.log1p(-pc)))
    return MetricSet(float(accuracy), float(precision), float(recall), float(ce))


def evaluate(model: LogisticModel, batch: Batch, threshold: float = 0.5) -> MetricSet:
    """Accuracy, precision, recall (0/0 -> 0) and clamped cross-entropy."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return metrics_from_proba(predict_proba(model, batch.covariates), batch.labels, threshold)


def errors(model: LogisticModel, batch: Batch, threshold: float = 0.5) -> np.ndarray:
    """Per-row 0/1 misclassification indicators in row order."""
    pred = predict_proba(model, batch.covariates) >= threshold
    return (pred != (batch.labels == 1)).astype(np.int8)
