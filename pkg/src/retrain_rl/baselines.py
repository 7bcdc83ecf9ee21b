"""Comparison updating strategies.

Two error-rate drift detectors (DDM and the moving-average HDDM test) fed
with per-example errors, plus fixed schedules. Every strategy exposes the
same ``decide(loop) -> action`` interface used by the evaluation loop.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from .drift_env import ConfigError
from .mdp import MaintenanceLoop


class Level(enum.IntEnum):
    STABLE = 0
    WARNING = 1
    DRIFT = 2


class DDM:
    """Drift Detection Method on a 0/1 error stream.

    Tracks the running error rate p and s = sqrt(p(1-p)/n); after
    ``min_samples`` observations it signals a warning when p + s exceeds
    p_min + 2 s_min and drift above p_min + 3 s_min, then resets.
    """

    def __init__(self, min_samples: int = 30, warning_level: float = 2.0,
                 drift_level: float = 3.0):
        self.min_samples = min_samples
        self.warning_level = warning_level
        self.drift_level = drift_level
        self.reset()

    def reset(self) -> None:
        self.n = 0
        self.errors = 0
        self.p = 1.0
        self.s = 0.0
        self.p_min = math.inf
        self.s_min = math.inf
        self.level = Level.STABLE

    def observe(self, error: int) -> Level:
        self.n += 1
        self.errors += int(error)
        self.p = self.errors / self.n
        self.s = math.sqrt(self.p * (1.0 - self.p) / self.n)
        if self.n < self.min_samples:
            self.level = Level.STABLE
            return self.level
        if self.p + self.s <= self.p_min + self.s_min:
            self.p_min, self.s_min = self.p, self.s
        # strict comparisons: an all-correct stream has s = s_min = 0
        if self.p + self.s > self.p_min + self.drift_level * self.s_min:
            self.reset()
            self.level = Level.DRIFT
        elif self.p + self.s > self.p_min + self.warning_level * self.s_min:
            self.level = Level.WARNING
        else:
            self.level = Level.STABLE
        return self.level

    def first_drift(self, errors) -> int:
        """Vectorised ``observe`` over a stream; index of the first drift or -1.

        On drift the detector is reset; otherwise its state advances past
        every element, exactly as repeated ``observe`` calls would.
        """
        e = np.asarray(errors, dtype=np.int64)
        if e.size == 0:
            return -1
        n = self.n + np.arange(1, e.size + 1)
        c = self.errors + np.cumsum(e)
        p = c / n
        s = np.sqrt(p * (1.0 - p) / n)
        key = p + s
        armed = n >= self.min_samples
        # running argmin of p + s over armed samples, ties resolved to the latest
        prev_key = self.p_min + self.s_min
        run_key = np.minimum.accumulate(np.where(armed, key, np.inf))
        run_key = np.minimum(run_key, prev_key)
        before = np.concatenate([[prev_key], run_key[:-1]])
        is_new = armed & (key <= before)
        idx = np.maximum.accumulate(np.where(is_new, np.arange(e.size), -1))
        has = idx >= 0
        pm = np.where(has, p[np.maximum(idx, 0)], self.p_min)
        sm = np.where(has, s[np.maximum(idx, 0)], self.s_min)
        with np.errstate(invalid="ignore"):
            drift = armed & (key > pm + self.drift_level * sm)
        hits = np.flatnonzero(drift)
        if hits.size:
            self.reset()
            self.level = Level.DRIFT
            return int(hits[0])
        self.n, self.errors = int(n[-1]), int(c[-1])
        self.p, self.s = float(p[-1]), float(s[-1])
        self.p_min, self.s_min = float(pm[-1]), float(sm[-1])
        last = e.size - 1
        if armed[last] and key[last] > pm[last] + self.warning_level * sm[last]:
            self.level = Level.WARNING
        else:
            self.level = Level.STABLE
        return -1


def ddm_observe(state: DDM, error: int) -> tuple[DDM, Level]:
    return state, state.observe(error)


class HDDM:
    """Hoeffding drift detector, A-test (moving averages), one-sided.

    Compares the mean of the whole stream since the last reset against the
    prefix with the lowest Hoeffding-adjusted mean; an increase beyond the
    bound at confidence ``drift_confidence`` signals drift.
    """

    def __init__(self, drift_confidence: float = 0.001, warning_confidence: float = 0.005):
        if not 0.0 < drift_confidence <= warning_confidence < 1.0:
            raise ConfigError("need 0 < drift_confidence <= warning_confidence < 1")
        self.drift_confidence = drift_confidence
        self.warning_confidence = warning_confidence
        self.reset()

    def reset(self) -> None:
        self.total_n = 0
        self.total_c = 0.0
        self.n_min = 0
        self.c_min = 0.0
        self.level = Level.STABLE

    @staticmethod
    def _bound(n: float, confidence: float) -> float:
        return math.sqrt(math.log(1.0 / confidence) / (2.0 * n))

    @staticmethod
    def _mean_increased(c_min, n_min, total_c, total_n, confidence) -> bool:
        if n_min == total_n:
            return False
        m = (total_n - n_min) / n_min * (1.0 / total_n)
        bound = math.sqrt(m / 2.0 * math.log(2.0 / confidence))
        return total_c / total_n - c_min / n_min >= bound

    def observe(self, error: int) -> Level:
        self.total_n += 1
        self.total_c += error
        if self.n_min == 0:
            self.n_min, self.c_min = self.total_n, self.total_c
        delta = self.drift_confidence
        if (self.c_min / self.n_min + self._bound(self.n_min, delta)
                >= self.total_c / self.total_n + self._bound(self.total_n, delta)):
            self.n_min, self.c_min = self.total_n, self.total_c

        args = (self.c_min, self.n_min, self.total_c, self.total_n)
        if self._mean_increased(*args, self.drift_confidence):
            self.reset()
            self.level = Level.DRIFT
        elif self._mean_increased(*args, self.warning_confidence):
            self.level = Level.WARNING
        else:
            self.level = Level.STABLE
        return self.level

    def first_drift(self, errors) -> int:
        """Vectorised ``observe`` over a stream; index of the first drift or -1."""
        e = np.asarray(errors, dtype=np.int64)
        if e.size == 0:
            return -1
        n = self.total_n + np.arange(1, e.size + 1)
        c = self.total_c + np.cumsum(e)
        delta = self.drift_confidence
        key = c / n + np.sqrt(np.log(1.0 / delta) / (2.0 * n))
        if self.n_min:
            prev_key = self.c_min / self.n_min + self._bound(self.n_min, delta)
        else:
            prev_key = np.inf
        run_key = np.minimum(np.minimum.accumulate(key), prev_key)
        before = np.concatenate([[prev_key], run_key[:-1]])
        is_new = key <= before
        idx = np.maximum.accumulate(np.where(is_new, np.arange(e.size), -1))
        has = idx >= 0
        n_min = np.where(has, n[np.maximum(idx, 0)], self.n_min)
        c_min = np.where(has, c[np.maximum(idx, 0)], self.c_min)
        diff = c / n - c_min / n_min
        m = (n - n_min) / n_min * (1.0 / n)
        bound = np.sqrt(m / 2.0 * np.log(2.0 / self.drift_confidence))
        drift = (n != n_min) & (diff >= bound)
        hits = np.flatnonzero(drift)
        if hits.size:
            self.reset()
            self.level = Level.DRIFT
            return int(hits[0])
        self.total_n, self.total_c = int(n[-1]), float(c[-1])
        self.n_min, self.c_min = int(n_min[-1]), float(c_min[-1])
        wbound = math.sqrt(m[-1] / 2.0 * math.log(2.0 / self.warning_confidence))
        warn = n[-1] != n_min[-1] and diff[-1] >= wbound
        self.level = Level.WARNING if warn else Level.STABLE
        return -1


def hddm_observe(state: HDDM, error: int) -> tuple[HDDM, Level]:
    return state, state.observe(error)


def batch_adapter(detector, errors) -> int:
    """Stream a batch's errors in row order; 1 if drift fires anywhere.

    The detector is reset after a drift signal, since the model is then
    retrained on the current batch.
    """
    return int(detector.first_drift(errors) >= 0)


def equally_spaced_times(k: int, T: int) -> list[int]:
    """``k`` update times spread evenly over 2..T."""
    if k < 0 or k > T - 1:
        raise ConfigError(f"need 0 <= k <= T - 1, got k={k}, T={T}")
    return [1 + math.ceil(i * (T - 1) / (k + 1)) for i in range(1, k + 1)]


# Strategies. `decide` is called after loop.observe(batch) for t >= 2.

class Strategy:
    name = "strategy"

    def decide(self, loop: MaintenanceLoop) -> int:
        raise NotImplementedError

    def feedback(self, loop: MaintenanceLoop, action: int, reward: float) -> None:
        pass


class DetectorStrategy(Strategy):
    def __init__(self, detector, name: str):
        self.detector = detector
        self.name = name

    def decide(self, loop):
        return batch_adapter(self.detector, loop.current_errors())


class RandomSchedule(Strategy):
    name = "random"

    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"update probability must lie in [0, 1], got {p}")
        self.p = p
        self.rng = rng

    def decide(self, loop):
        return int(self.rng.random() < self.p)


class EquallySpaced(Strategy):
    name = "equally_spaced"

    def __init__(self, k: int, T: int):
        self.times = frozenset(equally_spaced_times(k, T))

    def decide(self, loop):
        return int(loop.t + 1 in self.times)


class Always(Strategy):
    name = "always"

    def decide(self, loop):
        return 1


class Never(Strategy):
    name = "never"

    def decide(self, loop):
        return 0


def schedule_action(kind: str, t: int, T: int, rng: np.random.Generator | None = None,
                    p: float = 0.0, k: int = 0) -> int:
    """Stateless form of the schedule baselines for a single time step."""
    if not 2 <= t <= T:
        raise ConfigError(f"schedules act on 2 <= t <= T, got t={t}")
    if kind == "always":
        return 1
    if kind == "never":
        return 0
    if kind == "random":
        return int(rng.random() < p)
    if kind == "equally_spaced":
        return int(t in equally_spaced_times(k, T))
    raise ConfigError(f"unknown schedule {kind!r}")
