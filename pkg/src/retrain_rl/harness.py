"""Experiment orchestration: scenarios, training, multi-run comparison,
rho tuning and result files.

Random streams are derived from one master seed (see ``_Stream``), so a
configuration file plus its seed reproduces every number byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baselines as bl
from .drift_env import (
    Batch,
    ConfigError,
    DgpParams,
    DriftConfig,
    derive_rng,
    generate_batch,
    generate_drift_path,
    initial_params,
)
from .mdp import MaintenanceLoop, SimulatedDriftEnv
from .ppo import Agent, DynamicPolicy, PpoConfig, TrainResult, act, train_static

log = logging.getLogger(__name__)

SCENARIOS = ("well_specified", "misspecified")
STRATEGY_ORDER = ("ppo_dynamic", "ppo_static", "ddm", "hddm", "random", "equally_spaced",
                  "always", "never")
STRATEGY_LABELS = {
    "ppo_dynamic": "RL policy (dynamic)",
    "ppo_static": "RL policy (static)",
    "ddm": "DDM",
    "hddm": "HDDM",
    "random": "Random updates",
    "equally_spaced": "Equally spaced updates",
    "always": "Always update",
    "never": "Never update",
}


class _Stream:
    THETA = 1
    FIRST_BATCH = 2
    TRAIN_ENV = 3
    TRAIN_PPO = 4
    RUN = 10
    PILOT = 20
    # per-run sub-streams
    DRIFT = 0
    BATCH = 1
    POLICY = 2
    POLICY_UPDATE = 3
    RANDOM = 4


@dataclass
class ExperimentConfig:
    scenario: str = "well_specified"
    T: int = 500
    n: int = 10000
    runs: int = 50
    mu_grid: tuple[float, ...] = (0.01, 0.05, 0.10, 0.15, 0.20)
    rho: float = 0.01
    master_seed: int = 0
    out: str = "results"
    checkpoint: str = ""
    workers: int = 1
    # data-generating and drift processes
    d: int = 5
    step_std: float = 0.1
    jump_prob: float = 0.05
    jump_std: float = 2.0
    extended_scale: float = 1.0
    assumed_step_factor: float = 0.5
    # classifier / state
    threshold: float = 0.5
    # initial training
    train_steps: int = 200_000
    train_horizon: int = 200
    resample_train_covariates: bool = False
    rollout_length: int = 2048
    minibatch_size: int = 64
    epochs: int = 10
    clip: float = 0.2
    gamma: float = 0.8
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    # deployment
    policy_mode: str = "probabilistic"
    policy_threshold: float = 0.5
    dyn_rollout_length: int = 32
    dyn_minibatch_size: int = 16
    dyn_epochs: int = 10
    dyn_learning_rate: float = 1e-4
    # detectors
    ddm_min_samples: int = 30
    ddm_warning_level: float = 2.0
    ddm_drift_level: float = 3.0
    hddm_drift_confidence: float = 0.001
    hddm_warning_confidence: float = 0.005
    # rho tuning
    rho_grid: tuple[float, ...] = (0.005, 0.01, 0.02, 0.03, 0.04)
    pilot_runs: int = 10

    def __post_init__(self):
        self.mu_grid = tuple(float(m) for m in self.mu_grid)
        self.rho_grid = tuple(float(r) for r in self.rho_grid)
        self.validate()

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.T < 2:
            raise ConfigError("T must be >= 2")
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if not self.mu_grid or any(m < 0 for m in self.mu_grid):
            raise ConfigError("mu_grid must be non-empty with entries >= 0")
        if self.rho < 0:
            raise ConfigError("rho must be >= 0")
        if self.policy_mode not in ("probabilistic", "deterministic"):
            raise ConfigError(f"unknown policy_mode {self.policy_mode!r}")
        DriftConfig(self.step_std, self.jump_prob, self.jump_std)

    @property
    def ppo(self) -> PpoConfig:
        return PpoConfig(self.rollout_length, self.minibatch_size, self.epochs, self.clip,
                         self.gamma, self.gae_lambda, self.value_coef, self.entropy_coef,
                         self.learning_rate, self.max_grad_norm)

    @property
    def dynamic_ppo(self) -> PpoConfig:
        return dataclasses.replace(self.ppo, rollout_length=self.dyn_rollout_length,
                                   minibatch_size=self.dyn_minibatch_size,
                                   epochs=self.dyn_epochs,
                                   learning_rate=self.dyn_learning_rate)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    # flat "key = value  # comment" text format

    def dumps(self) -> str:
        lines = ["# experiment configuration (key = value)"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        changes = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            changes[key] = _parse_value(types[key], getattr(base, key), value)
        return dataclasses.replace(base, **changes)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.loads(Path(path).read_text())


def _parse_value(type_name, default, text: str):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean {text!r}")
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.split(",") if x.strip())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


@dataclass
class Scenario:
    truth: DgpParams
    true_drift: DriftConfig
    assumed: DgpParams
    assumed_drift: DriftConfig
    observed_dim: int
    first_batch: Batch


def build_scenario(config: ExperimentConfig) -> Scenario:
    """Truth, drift processes and the assumptions handed to the simulator.

    The misspecified scenario hides the extended terms from the simulator
    and assumes a slower drift without jumps.
    """
    seed = config.master_seed
    misspec = config.scenario == "misspecified"
    truth = initial_params(derive_rng(seed, _Stream.THETA), config.d, misspec,
                           config.extended_scale)
    true_drift = DriftConfig(config.step_std, config.jump_prob, config.jump_std)
    if misspec:
        assumed = truth.base()
        assumed_drift = DriftConfig(config.step_std * config.assumed_step_factor, 0.0, 0.0)
    else:
        assumed, assumed_drift = truth, true_drift
    first = generate_batch(truth, config.n, derive_rng(seed, _Stream.FIRST_BATCH),
                           time_index=1, observed_dim=config.d)
    return Scenario(truth, true_drift, assumed, assumed_drift, config.d, first)


def make_training_env(config: ExperimentConfig, scenario: Scenario,
                      rho: float | None = None) -> SimulatedDriftEnv:
    rho = config.rho if rho is None else rho
    return SimulatedDriftEnv(
        scenario.assumed, scenario.assumed_drift, scenario.first_batch, config.train_horizon,
        derive_rng(config.master_seed, _Stream.TRAIN_ENV), rho=rho,
        time_scale=config.train_horizon, resample_covariates=config.resample_train_covariates,
        threshold=config.threshold)


def train_agent(config: ExperimentConfig, scenario: Scenario | None = None,
                rho: float | None = None) -> TrainResult:
    scenario = scenario or build_scenario(config)
    rho = config.rho if rho is None else rho
    env = make_training_env(config, scenario, rho)
    seed = int(derive_rng(config.master_seed, _Stream.TRAIN_PPO).integers(2**63))
    return train_static(env, config.ppo, config.train_steps, seed,
                        time_scale=config.train_horizon, rho=rho)


# Evaluation

class StaticPolicy(bl.Strategy):
    name = "ppo_static"

    def __init__(self, agent: Agent, rng, mode="probabilistic", threshold=0.5):
        self.agent = agent
        self.rng = rng
        self.mode = mode
        self.threshold = threshold

    def decide(self, loop):
        return act(self.agent.actor, loop.current_state, self.mode, self.rng, self.threshold)


class DynamicPolicyStrategy(bl.Strategy):
    name = "ppo_dynamic"

    def __init__(self, agent: Agent, config: PpoConfig, action_rng, update_rng):
        self.policy = DynamicPolicy(agent, config, action_rng, update_rng)

    def decide(self, loop):
        return self.policy.decide(loop.current_state)

    def feedback(self, loop, action, reward):
        self.policy.observe_reward(reward)


@dataclass
class RunTrace:
    """Per-strategy record of one run; utilities and actions include t = 1."""

    actions: list[int]
    utilities: list[float]
    rewards: list[float]
    last_updates: list[int]
    stream_digest: str
    policy_updates: int = 0

    @property
    def n_updates(self) -> int:
        return int(sum(self.actions[1:]))

    def utility(self, mu: float) -> float:
        return float(np.sum(self.utilities) - mu * self.n_updates)


@dataclass(frozen=True)
class Calibration:
    mean_updates: float
    random_p: float
    spaced_k: int


def calibrate(mean_updates: float, T: int) -> Calibration:
    p = min(max(mean_updates / (T - 1), 0.0), 1.0)
    k = min(int(math.floor(mean_updates)), T - 1)
    return Calibration(float(mean_updates), p, k)


def real_stream(config: ExperimentConfig, scenario: Scenario, run: int):
    """First batch and a generator of the later batches for one run."""
    seed = config.master_seed
    path = generate_drift_path(scenario.truth, scenario.true_drift, config.T,
                               derive_rng(seed, _Stream.RUN, run, _Stream.DRIFT))

    def batch(t: int) -> Batch:
        rng = derive_rng(seed, _Stream.RUN, run, _Stream.BATCH, t)
        return generate_batch(path[t - 1], config.n, rng, time_index=t,
                              observed_dim=scenario.observed_dim)

    return batch(1), (batch(t) for t in range(2, config.T + 1))


def _make_strategies(names, config: ExperimentConfig, agent: Agent | None, run: int,
                     calibration: Calibration | None) -> dict[str, bl.Strategy]:
    seed = config.master_seed
    out = {}
    for name in names:
        if name == "ppo_static":
            rng = derive_rng(seed, _Stream.RUN, run, _Stream.POLICY)
            out[name] = StaticPolicy(agent, rng, config.policy_mode, config.policy_threshold)
        elif name == "ppo_dynamic":
            # same action stream as the static policy: identical until the first update
            out[name] = DynamicPolicyStrategy(
                agent, config.dynamic_ppo, derive_rng(seed, _Stream.RUN, run, _Stream.POLICY),
                derive_rng(seed, _Stream.RUN, run, _Stream.POLICY_UPDATE))
        elif name == "ddm":
            out[name] = bl.DetectorStrategy(
                bl.DDM(config.ddm_min_samples, config.ddm_warning_level, config.ddm_drift_level),
                "ddm")
        elif name == "hddm":
            out[name] = bl.DetectorStrategy(
                bl.HDDM(config.hddm_drift_confidence, config.hddm_warning_confidence), "hddm")
        elif name == "always":
            out[name] = bl.Always()
        elif name == "never":
            out[name] = bl.Never()
        elif name == "random":
            out[name] = bl.RandomSchedule(calibration.random_p,
                                          derive_rng(seed, _Stream.RUN, run, _Stream.RANDOM))
        elif name == "equally_spaced":
            out[name] = bl.EquallySpaced(calibration.spaced_k, config.T)
        else:
            raise ConfigError(f"unknown strategy {name!r}")
    return out


def evaluate_run(config: ExperimentConfig, scenario: Scenario, agent: Agent | None, run: int,
                 names, calibration: Calibration | None = None) -> dict[str, RunTrace]:
    """Every strategy in ``names`` consumes the same batch sequence of ``run``."""
    strategies = _make_strategies(names, config, agent, run, calibration)
    first, rest = real_stream(config, scenario, run)
    time_scale = agent.time_scale if agent is not None else config.train_horizon
    rho = agent.rho if agent is not None else config.rho
    loops = {name: MaintenanceLoop(first, time_scale, rho=rho, threshold=config.threshold,
                                   track_digests=True)
             for name in strategies}
    for batch in rest:
        for name, strategy in strategies.items():
            loop = loops[name]
            loop.observe(batch)
            action = int(strategy.decide(loop))
            r = loop.apply(action)
            strategy.feedback(loop, action, r)
    traces = {}
    for name, loop in loops.items():
        digest = _combine(loop.digests)
        extra = getattr(strategies[name], "policy", None)
        traces[name] = RunTrace(list(loop.ledger.actions), list(loop.ledger.utilities),
                                list(loop.rewards), list(loop.tracker.update_history), digest,
                                extra.n_updates if extra is not None else 0)
    digests = {t.stream_digest for t in traces.values()}
    assert len(digests) == 1, "strategies consumed different batch streams"
    return traces


def _combine(digests) -> str:
    h = hashlib.blake2b(digest_size=16)
    for d in digests:
        h.update(d.encode())
    return h.hexdigest()


def _evaluate_many(config, scenario, agent, names, calibration=None):
    args = [(config, scenario, agent, r, tuple(names), calibration) for r in range(config.runs)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as ex:
            return list(ex.map(_evaluate_star, args))
    return [_evaluate_star(a) for a in args]


def _evaluate_star(args):
    return evaluate_run(*args)


@dataclass
class ResultTable:
    mu_grid: tuple[float, ...]
    rows: list[dict] = field(default_factory=list)

    def get(self, strategy: str, mu: float) -> dict:
        for row in self.rows:
            if row["strategy"] == strategy and row["mu"] == mu:
                return row
        raise KeyError((strategy, mu))

    @property
    def strategies(self) -> list[str]:
        seen = []
        for row in self.rows:
            if row["strategy"] not in seen:
                seen.append(row["strategy"])
        return seen

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "mu", "mean_utility", "stderr", "mean_updates"])
        for row in self.rows:
            w.writerow([row["strategy"], repr(row["mu"]), repr(row["mean_utility"]),
                        repr(row["stderr"]), repr(row["mean_updates"])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ResultTable:
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append({"strategy": rec["strategy"], "mu": float(rec["mu"]),
                         "mean_utility": float(rec["mean_utility"]),
                         "stderr": float(rec["stderr"]),
                         "mean_updates": float(rec["mean_updates"])})
        mus = []
        for r in rows:
            if r["mu"] not in mus:
                mus.append(r["mu"])
        return cls(tuple(mus), rows)

    def to_markdown(self, title: str = "") -> str:
        head = "| Method | " + " | ".join(f"mu = {m:.2f}" for m in self.mu_grid) \
            + " | Mean updates |"
        sep = "|---" * (len(self.mu_grid) + 2) + "|"
        lines = [f"### {title}", ""] if title else []
        lines += [head, sep]
        for s in self.strategies:
            cells = [f"{self.get(s, m)['mean_utility']:.1f} ({self.get(s, m)['stderr']:.2f})"
                     for m in self.mu_grid]
            upd = self.get(s, self.mu_grid[0])["mean_updates"]
            lines.append(f"| {STRATEGY_LABELS.get(s, s)} | " + " | ".join(cells)
                         + f" | {upd:.2f} |")
        return "\n".join(lines) + "\n"


def summarize(traces: list[dict[str, RunTrace]], mu_grid, order=STRATEGY_ORDER) -> ResultTable:
    names = [s for s in order if s in traces[0]] + [s for s in traces[0] if s not in order]
    n_runs = len(traces)
    if n_runs == 1:
        warnings.warn("a single run: standard errors are reported as 0", stacklevel=2)
    table = ResultTable(tuple(mu_grid))
    for name in names:
        updates = np.array([tr[name].n_updates for tr in traces], dtype=float)
        for mu in mu_grid:
            u = np.array([tr[name].utility(mu) for tr in traces])
            se = float(np.std(u, ddof=1) / math.sqrt(n_runs)) if n_runs > 1 else 0.0
            table.rows.append({"strategy": name, "mu": float(mu),
                               "mean_utility": float(np.mean(u)), "stderr": se,
                               "mean_updates": float(np.mean(updates))})
    return table


@dataclass
class ComparisonResult:
    table: ResultTable
    traces: list[dict[str, RunTrace]]
    calibration: Calibration
    config: ExperimentConfig


def run_comparison(config: ExperimentConfig, agent: Agent,
                   scenario: Scenario | None = None) -> ComparisonResult:
    """Evaluate every strategy on ``config.runs`` simulated real streams.

    Random and equally spaced schedules are calibrated on the static
    policy's realised mean update count before they are evaluated.
    """
    if agent is None:
        raise ConfigError("a trained agent is required")
    scenario = scenario or build_scenario(config)
    first_pass = ("ppo_dynamic", "ppo_static", "ddm", "hddm", "always", "never")
    traces = _evaluate_many(config, scenario, agent, first_pass)
    mean_updates = float(np.mean([tr["ppo_static"].n_updates for tr in traces]))
    calibration = calibrate(mean_updates, config.T)
    second = _evaluate_many(config, scenario, agent, ("random", "equally_spaced"), calibration)
    for tr, extra in zip(traces, second):
        if tr["ppo_static"].stream_digest != extra["random"].stream_digest:
            raise RuntimeError("calibrated baselines saw a different batch stream")
        tr.update(extra)
    table = summarize(traces, config.mu_grid)
    return ComparisonResult(table, traces, calibration, config)


# rho tuning

@dataclass
class TuneResult:
    chosen_rho: float
    pilot: ResultTable
    curves: dict[float, list[dict]]
    agents: dict[float, Agent]


def pilot_utilities(config: ExperimentConfig, scenario: Scenario, agent: Agent,
                    pilot_runs: int) -> list[RunTrace]:
    """Run the static policy on fresh episodes of the simulating environment."""
    seed = config.master_seed
    out = []
    for run in range(pilot_runs):
        path = generate_drift_path(scenario.assumed, scenario.assumed_drift, config.train_horizon,
                                   derive_rng(seed, _Stream.PILOT, run, _Stream.DRIFT))
        brng = derive_rng(seed, _Stream.PILOT, run, _Stream.BATCH)
        X = None if config.resample_train_covariates else scenario.first_batch.covariates
        loop = MaintenanceLoop(scenario.first_batch, agent.time_scale, rho=agent.rho,
                               threshold=config.threshold)
        policy = StaticPolicy(agent, derive_rng(seed, _Stream.PILOT, run, _Stream.POLICY),
                              config.policy_mode, config.policy_threshold)
        for t in range(2, config.train_horizon + 1):
            loop.observe(generate_batch(path[t - 1], config.n, brng, X=X, time_index=t))
            loop.apply(policy.decide(loop))
        out.append(RunTrace(list(loop.ledger.actions), list(loop.ledger.utilities),
                            list(loop.rewards), list(loop.tracker.update_history), ""))
    return out


def choose_rho(pilot: ResultTable, rhos) -> float:
    """The rho that is best at the most costs; ties go to the smaller rho."""
    wins = {r: 0 for r in rhos}
    for mu in pilot.mu_grid:
        best = max(rhos, key=lambda r: (pilot.get(_rho_name(r), mu)["mean_utility"], -r))
        wins[best] += 1
    return max(rhos, key=lambda r: (wins[r], -r))


def _rho_name(rho: float) -> str:
    return f"rho={rho!r}"


def tune_rho(config: ExperimentConfig, rho_grid=None, pilot_runs: int | None = None) -> TuneResult:
    """Train one agent per rho and pick the one that wins at the most costs.

    Pilot utilities come from fresh episodes of the simulating environment,
    never from the real stream. A single-element grid is returned as is.
    """
    rho_grid = tuple(config.rho_grid if rho_grid is None else rho_grid)
    pilot_runs = config.pilot_runs if pilot_runs is None else pilot_runs
    if not rho_grid:
        raise ConfigError("rho_grid must be non-empty")
    scenario = build_scenario(config)
    curves, agents, pilot_traces = {}, {}, {}
    for rho in rho_grid:
        res = train_agent(config, scenario, rho)
        curves[rho], agents[rho] = res.reward_curve, res.agent
        if len(rho_grid) > 1:
            pilot_traces[rho] = pilot_utilities(config, scenario, res.agent, pilot_runs)
    if len(rho_grid) == 1:
        return TuneResult(rho_grid[0], ResultTable(config.mu_grid), curves, agents)
    if pilot_runs < 1:
        raise ConfigError("pilot_runs must be >= 1 to compare several rho values")
    per_run = [{_rho_name(r): pilot_traces[r][i] for r in rho_grid} for i in range(pilot_runs)]
    pilot = summarize(per_run, config.mu_grid, order=())
    return TuneResult(choose_rho(pilot, rho_grid), pilot, curves, agents)


# Output files

def write_reward_curve(curve: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "mean_episode_reward", "mean_episode_length",
                    "mean_update_prob"])
        for row in curve:
            w.writerow([row["iteration"], repr(row["mean_episode_reward"]),
                        repr(row["mean_episode_length"]), repr(row["mean_update_prob"])])


def write_traces(traces: list[dict[str, RunTrace]], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for run, per_strategy in enumerate(traces):
        with open(d / f"run_{run:03d}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["strategy", "t", "action", "reward", "utility", "last_update"])
            for name, tr in per_strategy.items():
                for t, (a, r, u, lu) in enumerate(zip(tr.actions, tr.rewards, tr.utilities,
                                                      tr.last_updates), 1):
                    w.writerow([name, t, a, repr(r), repr(u), lu])


def emit_outputs(result: ComparisonResult, directory, reward_curve=None) -> dict[str, Path]:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        paths = {"results_csv": d / "results.csv", "results_md": d / "results.md",
                 "config": d / "config.txt", "summary": d / "summary.json"}
        paths["results_csv"].write_text(result.table.to_csv())
        title = f"Mean cumulative utility over {result.config.runs} runs " \
                f"(T={result.config.T}, scenario={result.config.scenario}); " \
                f"standard errors in parentheses"
        paths["results_md"].write_text(result.table.to_markdown(title))
        paths["config"].write_text(result.config.dumps())
        summary = {"calibration": dataclasses.asdict(result.calibration),
                   "policy_updates_dynamic": [tr["ppo_dynamic"].policy_updates
                                              for tr in result.traces]}
        paths["summary"].write_text(json.dumps(summary, indent=2) + "\n")
        write_traces(result.traces, d / "traces")
        if reward_curve is not None:
            paths["reward_curve"] = d / "reward_curve.csv"
            write_reward_curve(reward_curve, paths["reward_curve"])
    except OSError as exc:
        raise OSError(f"failed writing outputs under {d}: {exc}") from exc
    return paths
