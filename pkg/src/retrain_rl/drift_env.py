"""Synthetic drifting data: covariates, the logistic data-generating process
and random-walk parameter paths with occasional sudden jumps.

Every generator takes an explicit ``numpy.random.Generator`` so the caller
decides how streams are split (see :func:`derive_rng`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

# Number of extra terms in the misspecified truth: x1*x2, x3**2 and an
# unobserved extra covariate.
N_EXTENDED_TERMS = 3

_P_LO = np.finfo(float).tiny
_P_HI = 1.0 - np.finfo(float).epsneg


class ConfigError(ValueError):
    """Raised for invalid sizes, dimensions or parameter ranges."""


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream addressed by ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def sigmoid(z):
    """Logistic function clamped to the open interval (0, 1)."""
    p = expit(z)
    np.maximum(p, _P_LO, out=p)
    np.minimum(p, _P_HI, out=p)
    return p


@dataclass(frozen=True)
class DgpParams:
    """Parameters of the logistic data-generating process.

    ``extended_terms`` holds the coefficients of (x1*x2, x3**2, x_{d+1})
    and is only set for the misspecified truth. A model with extended
    terms needs ``d + 1`` covariate columns.
    """

    intercept: float
    coefficients: np.ndarray
    extended_terms: np.ndarray | None = None

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float).reshape(-1)
        object.__setattr__(self, "coefficients", coef)
        if self.extended_terms is not None:
            ext = np.asarray(self.extended_terms, dtype=float).reshape(-1)
            if ext.size != N_EXTENDED_TERMS:
                raise ConfigError(f"extended_terms needs {N_EXTENDED_TERMS} entries, got {ext.size}")
            object.__setattr__(self, "extended_terms", ext)
        if coef.size < 1:
            raise ConfigError("at least one coefficient is required")
        if not np.all(np.isfinite(self.as_vector())):
            raise ConfigError("DGP parameters must be finite")

    @property
    def dim(self) -> int:
        return self.coefficients.size

    @property
    def n_covariates(self) -> int:
        """Covariate columns consumed by :func:`logistic_response`."""
        return self.dim + (1 if self.extended_terms is not None else 0)

    def as_vector(self) -> np.ndarray:
        parts = [[float(self.intercept)], self.coefficients]
        if self.extended_terms is not None:
            parts.append(self.extended_terms)
        return np.concatenate(parts)

    def with_vector(self, vec) -> DgpParams:
        """Same layout as ``self`` filled from a flat vector."""
        vec = np.asarray(vec, dtype=float)
        d = self.dim
        ext = vec[1 + d:].copy() if self.extended_terms is not None else None
        return DgpParams(float(vec[0]), vec[1:1 + d].copy(), ext)

    def base(self) -> DgpParams:
        """The plain logistic part, dropping any extended terms."""
        return DgpParams(self.intercept, self.coefficients.copy())


@dataclass(frozen=True)
class DriftConfig:
    step_std: float = 0.1
    jump_prob: float = 0.05
    jump_std: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.jump_prob <= 1.0:
            raise ConfigError(f"jump_prob must lie in [0, 1], got {self.jump_prob}")
        if self.step_std < 0 or self.jump_std < 0:
            raise ConfigError("step_std and jump_std must be non-negative")


@dataclass(frozen=True)
class DriftPath:
    """Parameter trajectory theta_1..theta_J, stored as a J x k array."""

    template: DgpParams
    vectors: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, i: int) -> DgpParams:
        return self.template.with_vector(self.vectors[i])

    @property
    def params(self) -> list[DgpParams]:
        return [self[i] for i in range(len(self))]


@dataclass(frozen=True)
class Batch:
    """One time step's dataset: covariates, binary labels and the step index."""

    covariates: np.ndarray
    labels: np.ndarray
    time_index: int = 1

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        y = np.asarray(self.labels).reshape(-1)
        if X.shape[0] != y.size:
            raise ConfigError(f"{X.shape[0]} covariate rows but {y.size} labels")
        if y.size < 1:
            raise ConfigError("a batch needs at least one sample")
        if not np.all((y == 0) | (y == 1)):
            raise ConfigError("labels must be binary")
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "labels", y.astype(np.int8))

    def __len__(self) -> int:
        return self.labels.size

    def digest(self) -> str:
        import hashlib

        h = hashlib.blake2b(digest_size=16)
        h.update(np.ascontiguousarray(self.covariates).tobytes())
        h.update(self.labels.tobytes())
        h.update(str(self.time_index).encode())
        return h.hexdigest()


def sample_covariates(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, d))


def linear_predictor(X, theta: DgpParams) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = theta.dim
    if X.shape[1] != theta.n_covariates:
        raise ConfigError(f"expected {theta.n_covariates} covariate columns, got {X.shape[1]}")
    eta = theta.intercept + X[:, :d] @ theta.coefficients
    if theta.extended_terms is not None:
        if d < 3:
            raise ConfigError("extended terms need at least 3 base covariates")
        e = theta.extended_terms
        eta = eta + e[0] * X[:, 0] * X[:, 1] + e[1] * X[:, 2] ** 2 + e[2] * X[:, d]
    return eta


def logistic_response(X, theta: DgpParams) -> np.ndarray:
    """P(Y = 1 | X) under ``theta``."""
    return sigmoid(linear_predictor(X, theta))


def generate_drift_path(theta1: DgpParams, phi: DriftConfig, J: int,
                        rng: np.random.Generator) -> DriftPath:
    """Random walk of every parameter with rare additive jumps.

    The same number of draws is consumed whatever the configuration, so a
    path with ``jump_prob=1, jump_std=0`` equals the pure random walk.
    """
    if J < 1:
        raise ConfigError(f"horizon must be >= 1, got {J}")
    start = theta1.as_vector()
    k = start.size
    steps = rng.standard_normal((J - 1, k))
    jump_draws = rng.random(J - 1)
    shocks = rng.standard_normal((J - 1, k))
    jumped = (jump_draws < phi.jump_prob)[:, None]
    increments = phi.step_std * steps + np.where(jumped, phi.jump_std * shocks, 0.0)
    vectors = np.cumsum(np.vstack([start, increments]), axis=0)
    vectors[0] = start
    return DriftPath(theta1, vectors)


def generate_batch(theta: DgpParams, n: int, rng: np.random.Generator, X=None,
                   time_index: int = 1, observed_dim: int | None = None) -> Batch:
    """Draw labels from ``theta``.

    With ``X=None`` fresh standard-normal covariates are sampled; otherwise
    the supplied matrix is reused. ``observed_dim`` keeps only the leading
    columns in the returned batch (hidden covariates still drive the labels).
    """
    if n < 1:
        raise ConfigError(f"batch size must be >= 1, got {n}")
    if X is None:
        X = sample_covariates(n, theta.n_covariates, rng)
    else:
        X = np.atleast_2d(np.asarray(X, dtype=float))
    p = logistic_response(X, theta)
    y = (rng.random(X.shape[0]) < p).astype(np.int8)
    if observed_dim is not None:
        X = X[:, :observed_dim]
    return Batch(X, y, time_index)


def initial_params(rng: np.random.Generator, d: int = 5, misspecified: bool = False,
                   extended_scale: float = 1.0) -> DgpParams:
    """Starting truth: zero intercept and standard-normal coefficients."""
    coef = rng.standard_normal(d)
    ext = extended_scale * rng.standard_normal(N_EXTENDED_TERMS) if misspecified else None
    return DgpParams(0.0, coef, ext)
