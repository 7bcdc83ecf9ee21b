"""The model-maintenance MDP.

A :class:`MaintenanceLoop` owns the deployed classifier and replays the
decision process one batch at a time: ``observe`` the new batch (building
the state from the incumbent model), then ``apply`` an update decision
(computing the reward and the realised utility). The simulated training
environment and the evaluation harness both drive this same object.

State vector layout (``d`` = classifier features)::

    [acc_t, acc_{t-1}, acc_{t-2},      incumbent accuracy on the 3 latest batches
     acc_at_last_update,               in-sample accuracy when it was fitted
     precision_t, recall_t, ce_t,      incumbent on the current batch
     intercept, w_1..w_d,              incumbent coefficients
     steps_since_update / time_scale]
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import classifier as clf
from .classifier import FitSettings, LogisticModel, MetricSet
from .drift_env import (
    Batch,
    ConfigError,
    DgpParams,
    DriftConfig,
    generate_batch,
    generate_drift_path,
)

WINDOW = 3


def state_dim(d: int, window: int = WINDOW) -> int:
    return window + 1 + 3 + (d + 1) + 1


class Env(Protocol):
    state_dim: int

    def reset(self) -> np.ndarray: ...

    def step(self, action: int) -> tuple[np.ndarray, float, bool]: ...


class EpisodeDone(RuntimeError):
    """``step`` was called on a finished episode."""


@dataclass
class UpdateTracker:
    """Most-recent-update bookkeeping, u(t) = t if a_t = 1 else u(t - 1)."""

    last_update: int = 0
    action_history: list[int] = field(default_factory=list)
    update_history: list[int] = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.action_history)

    def apply(self, t: int, action: int) -> UpdateTracker:
        if t != self.t + 1:
            raise ValueError(f"non-sequential time index {t} after {self.t}")
        if action not in (0, 1):
            raise ValueError(f"action must be 0 or 1, got {action}")
        if t == 1 and action != 1:
            raise ValueError("the first step always fits the initial model (a_1 = 1)")
        self.last_update = t if action == 1 else self.last_update
        assert 1 <= self.last_update <= t
        self.action_history.append(int(action))
        self.update_history.append(self.last_update)
        return self


def apply_action(tracker: UpdateTracker, t: int, action: int) -> UpdateTracker:
    return tracker.apply(t, action)


@dataclass
class UtilityLedger:
    """Per-step utilities and actions with an incrementally kept total."""

    update_cost: float = 0.0
    utilities: list[float] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    running_utility: float = 0.0
    running_updates: int = 0

    def record(self, utility: float, action: int) -> None:
        self.utilities.append(float(utility))
        self.actions.append(int(action))
        self.running_utility += float(utility)
        if len(self.actions) > 1:
            self.running_updates += int(action)

    @property
    def n_updates(self) -> int:
        """Updates after t = 1 (the initial fit is free)."""
        return self.running_updates

    def total(self, mu: float | None = None) -> float:
        mu = self.update_cost if mu is None else mu
        return self.running_utility - mu * self.running_updates

    def __len__(self) -> int:
        return len(self.utilities)


def cumulative_utility(utilities: Sequence[float] | UtilityLedger, actions=None,
                       mu: float | None = None) -> float:
    """Sum of per-step utilities minus ``mu`` per update at t >= 2.

    Accepts either a ledger or raw ``(utilities, actions)`` sequences.
    """
    if isinstance(utilities, UtilityLedger):
        ledger = utilities
        mu = ledger.update_cost if mu is None else mu
        utilities, actions = ledger.utilities, ledger.actions
    if mu is None:
        mu = 0.0
    eta = np.asarray(utilities, dtype=float)
    a = np.asarray(actions, dtype=float)
    return float(np.sum(eta) - mu * np.sum(a[1:]))


def reward(eta_new: float, eta_old: float, rho: float, action: int) -> float:
    return eta_new - eta_old - rho if action == 1 else 0.0


def compute_reward(batch: Batch, candidate: LogisticModel | None, incumbent: LogisticModel,
                   rho: float, action: int, threshold: float = 0.5) -> float:
    """Accuracy gain of the candidate over the incumbent on ``batch`` minus ``rho``."""
    if action == 0:
        return 0.0
    eta_new = clf.evaluate(candidate, batch, threshold).accuracy
    eta_old = clf.evaluate(incumbent, batch, threshold).accuracy
    return reward(eta_new, eta_old, rho, 1)


def build_state(recent_metrics: Sequence[MetricSet], acc_at_last_update: float,
                model: LogisticModel, t: int, last_update: int, time_scale: float,
                window: int = WINDOW) -> np.ndarray:
    """Assemble the fixed-length state vector.

    ``recent_metrics`` is most-recent first; missing history is padded by
    repeating the oldest entry. ``last_update`` is u(t - 1).
    """
    if not recent_metrics:
        raise ValueError("need at least one metric set")
    accs = [m.accuracy for m in recent_metrics[:window]]
    accs += [accs[-1]] * (window - len(accs))
    cur = recent_metrics[0]
    since = (t - last_update) / time_scale if t > 1 else 0.0
    state = np.concatenate([
        accs,
        [acc_at_last_update, cur.precision, cur.recall, cur.cross_entropy],
        model.coefficients(),
        [since],
    ])
    return state


class MaintenanceLoop:
    """Deployed classifier plus the bookkeeping of one model life-span.

    ``fit_fn`` is injectable so tests can count refits.
    """

    def __init__(self, first_batch: Batch, time_scale: float, *, rho: float = 0.0,
                 threshold: float = 0.5, window: int = WINDOW,
                 fit_settings: FitSettings = FitSettings(),
                 fit_fn: Callable[[Batch, FitSettings], LogisticModel] | None = None,
                 track_digests: bool = False):
        self.time_scale = float(time_scale)
        self.rho = rho
        self.threshold = threshold
        self.window = window
        self.fit_settings = fit_settings
        self._fit = fit_fn or clf.fit
        self.tracker = UpdateTracker()
        self.ledger = UtilityLedger()
        self.rewards: list[float] = []
        self.track_digests = track_digests
        self.digests: list[str] = []
        self._metric_cache: dict[int, MetricSet] = {}
        self._batches: deque[Batch] = deque(maxlen=window)
        self.batch: Batch | None = None
        self._metrics: list[MetricSet] = []
        self._pending = False
        self.current_state: np.ndarray | None = None

        self.incumbent = self._fit(first_batch, fit_settings)
        self.acc_at_last_update = clf.evaluate(self.incumbent, first_batch, threshold).accuracy
        self._accept(first_batch)
        self.tracker.apply(1, 1)
        self.ledger.record(self.acc_at_last_update, 1)
        self.rewards.append(0.0)

    @property
    def t(self) -> int:
        return self.tracker.t

    @property
    def dim(self) -> int:
        return self.incumbent.dim

    @property
    def state_dim(self) -> int:
        return state_dim(self.dim, self.window)

    def _accept(self, batch: Batch) -> None:
        self.batch = batch
        self._batches.appendleft(batch)
        if self.track_digests:
            self.digests.append(batch.digest())

    def _window_metrics(self) -> list[MetricSet]:
        # cache keyed by time index; cleared whenever the incumbent changes
        out = []
        for b in self._batches:
            m = self._metric_cache.get(b.time_index)
            if m is None:
                m = self._metric_cache[b.time_index] = clf.evaluate(self.incumbent, b,
                                                                    self.threshold)
            out.append(m)
        return out

    def state(self) -> np.ndarray:
        t = self.t + 1 if self._pending else self.t
        last = self.tracker.last_update
        return build_state(self._metrics, self.acc_at_last_update, self.incumbent, t, last,
                           self.time_scale, self.window)

    def observe(self, batch: Batch) -> np.ndarray:
        """Receive the batch for time t + 1 and return the decision state."""
        if self._pending:
            raise RuntimeError("previous batch has not been acted on")
        if batch.time_index != self.t + 1:
            raise ValueError(f"expected batch for t={self.t + 1}, got t={batch.time_index}")
        self._accept(batch)
        self._metrics = self._window_metrics()
        self._pending = True
        self.current_state = self.state()
        return self.current_state

    @property
    def current_metrics(self) -> MetricSet:
        return self._metrics[0]

    def current_errors(self) -> np.ndarray:
        return clf.errors(self.incumbent, self.batch, self.threshold)

    def apply(self, action: int) -> float:
        """Act on the observed batch; returns the reward and records utility."""
        if not self._pending:
            raise RuntimeError("observe() must precede apply()")
        t = self.t + 1
        eta_old = self._metrics[0].accuracy
        if action == 1:
            candidate = self._fit(self.batch, self.fit_settings)
            eta_new = clf.evaluate(candidate, self.batch, self.threshold).accuracy
            r = reward(eta_new, eta_old, self.rho, 1)
            self.incumbent = candidate
            self._metric_cache = {}
            self.acc_at_last_update = eta_new
            utility = eta_new
        else:
            r = 0.0
            utility = eta_old
        self.tracker.apply(t, action)
        self.ledger.record(utility, action)
        self.rewards.append(r)
        self._pending = False
        if action == 1:
            self._metrics = self._window_metrics()
        else:
            keep = {b.time_index for b in self._batches}
            self._metric_cache = {k: v for k, v in self._metric_cache.items() if k in keep}
        return r


class SimulatedDriftEnv:
    """Training environment: simulated drift episodes with step/reset.

    Each episode draws a fresh drift path of length ``horizon`` from the
    assumed truth and drift process. ``first_batch`` is the real initial
    dataset; its covariates are reused for every simulated batch unless
    ``resample_covariates`` is set.
    """

    def __init__(self, theta1: DgpParams, drift: DriftConfig, first_batch: Batch,
                 horizon: int, rng: np.random.Generator, *, rho: float = 0.02,
                 time_scale: float | None = None, resample_covariates: bool = False,
                 threshold: float = 0.5, fit_settings: FitSettings = FitSettings(),
                 fit_fn=None):
        if horizon < 2:
            raise ConfigError("episode horizon must be >= 2")
        if first_batch.covariates.shape[1] != theta1.n_covariates:
            raise ConfigError("initial batch does not match the assumed DGP dimension")
        self.theta1 = theta1
        self.drift = drift
        self.first_batch = first_batch
        self.horizon = horizon
        self.rng = rng
        self.rho = rho
        self.time_scale = float(time_scale or horizon)
        self.resample_covariates = resample_covariates
        self.threshold = threshold
        self.fit_settings = fit_settings
        self.fit_fn = fit_fn
        self.state_dim = state_dim(theta1.dim)
        self.loop: MaintenanceLoop | None = None
        self.path = None
        self.done = True

    def _next_batch(self, t: int) -> Batch:
        X = None if self.resample_covariates else self.first_batch.covariates
        return generate_batch(self.path[t - 1], len(self.first_batch), self.rng, X=X,
                              time_index=t)

    def reset(self) -> np.ndarray:
        self.path = generate_drift_path(self.theta1, self.drift, self.horizon, self.rng)
        self.loop = MaintenanceLoop(self.first_batch, self.time_scale, rho=self.rho,
                                    threshold=self.threshold,
                                    fit_settings=self.fit_settings, fit_fn=self.fit_fn)
        self.done = False
        return self.loop.observe(self._next_batch(2))

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EpisodeDone("episode finished; call reset()")
        r = self.loop.apply(int(action))
        if self.loop.t >= self.horizon:
            self.done = True
            return self.loop.state(), r, True
        return self.loop.observe(self._next_batch(self.loop.t + 1)), r, False
