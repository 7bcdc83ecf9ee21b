"""Proximal policy optimisation for the binary update decision.

Actor and critic are separate tanh MLPs. Training alternates rollout
collection in a step/reset environment with K epochs of clipped-surrogate
updates over shuffled mini-batches. The same update routine drives the
deployment-time (dynamic) policy, which learns from real batches every
``rollout_length`` decisions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import neural as nn
from .drift_env import Batch, ConfigError
from .mdp import Env, MaintenanceLoop

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoConfig:
    rollout_length: int = 2048
    minibatch_size: int = 64
    epochs: int = 10
    clip: float = 0.2
    gamma: float = 0.8
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    learning_rate: float = 3e-4
    max_grad_norm: float | None = 0.5
    hidden: tuple[int, ...] = (64, 64)
    normalize_advantage: bool = True

    def __post_init__(self):
        if self.rollout_length < 1:
            raise ConfigError("rollout_length must be >= 1")
        if not 1 <= self.minibatch_size <= self.rollout_length:
            raise ConfigError("minibatch size must satisfy 1 <= G <= rollout_length")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ConfigError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip <= 0:
            raise ConfigError("clip range must be positive")


DYNAMIC_DEFAULTS = PpoConfig(rollout_length=32, minibatch_size=16, epochs=10,
                             learning_rate=1e-4)


@dataclass
class Agent:
    """Actor/critic pair with their optimisers and deployment metadata.

    ``time_scale`` normalises the steps-since-update state feature and must
    be the same at training and deployment time.
    """

    actor: nn.Mlp
    critic: nn.Mlp
    actor_opt: nn.AdamState
    critic_opt: nn.AdamState
    time_scale: float = 1.0
    rho: float = 0.0

    @classmethod
    def create(cls, state_dim: int, config: PpoConfig, rng: np.random.Generator,
               time_scale: float = 1.0, rho: float = 0.0) -> Agent:
        dims = (state_dim, *config.hidden)
        actor = nn.Mlp.init((*dims, 2), rng, output_gain=0.01)
        critic = nn.Mlp.init((*dims, 1), rng, output_gain=1.0)
        agent = cls(actor, critic, nn.AdamState.for_net(actor), nn.AdamState.for_net(critic),
                    time_scale, rho)
        agent.configure(config)
        return agent

    @property
    def state_dim(self) -> int:
        return self.actor.layer_dims[0]

    def configure(self, config: PpoConfig) -> None:
        for opt in (self.actor_opt, self.critic_opt):
            opt.lr = config.learning_rate
            opt.max_grad_norm = config.max_grad_norm

    def copy(self) -> Agent:
        return Agent(self.actor.copy(), self.critic.copy(), self.actor_opt.copy(),
                     self.critic_opt.copy(), self.time_scale, self.rho)

    def update_prob(self, state) -> float:
        return float(nn.softmax(self.actor(state))[1])

    def value(self, states) -> np.ndarray | float:
        out = self.critic(states)
        return float(out[0]) if np.ndim(states) == 1 else out[:, 0]

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nn.save(self.actor, d / "actor.bin")
        nn.save(self.critic, d / "critic.bin")
        meta = {"format": 1, "state_dim": self.state_dim, "time_scale": self.time_scale,
                "rho": self.rho}
        (d / "agent.json").write_text(json.dumps(meta, indent=2) + "\n")
        return d

    @classmethod
    def load(cls, directory, config: PpoConfig = PpoConfig()) -> Agent:
        d = Path(directory)
        if not (d / "agent.json").exists():
            raise FileNotFoundError(f"no agent checkpoint in {d}")
        meta = json.loads((d / "agent.json").read_text())
        actor, critic = nn.load(d / "actor.bin"), nn.load(d / "critic.bin")
        agent = cls(actor, critic, nn.AdamState.for_net(actor), nn.AdamState.for_net(critic),
                    meta["time_scale"], meta["rho"])
        agent.configure(config)
        return agent


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    log_prob: float
    reward: float
    value: float
    done: bool


@dataclass
class RolloutBuffer:
    transitions: list[Transition] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def add(self, tr: Transition) -> None:
        if self.advantages is not None:
            raise RuntimeError("buffer already finalized")
        self.transitions.append(tr)

    def __len__(self) -> int:
        return len(self.transitions)

    def arrays(self):
        trs = self.transitions
        return (np.array([t.state for t in trs]), np.array([t.action for t in trs]),
                np.array([t.log_prob for t in trs]), np.array([t.reward for t in trs]),
                np.array([t.value for t in trs]), np.array([t.done for t in trs], dtype=bool))

    def finalize(self, last_value: float, gamma: float, lam: float) -> None:
        if self.advantages is not None:
            raise RuntimeError("buffer already finalized")
        _, _, _, rewards, values, dones = self.arrays()
        self.advantages, self.returns = compute_gae(rewards, values, dones, last_value,
                                                    gamma, lam)


def compute_gae(rewards, values, dones, last_value: float, gamma: float, lam: float):
    """Generalised advantage estimates and value targets.

    ``dones[t]`` marks that the episode ended after transition ``t``;
    ``last_value`` bootstraps the transition after the final one.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = rewards.size
    adv = np.zeros(n)
    next_value, running = float(last_value), 0.0
    for t in range(n - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def sample_action(agent: Agent, state, rng: np.random.Generator) -> tuple[int, float, float]:
    """Draw an action from the actor; returns ``(action, log_prob, value)``."""
    logits = agent.actor(state)
    probs = nn.softmax(logits)
    action = int(rng.random() < probs[1])
    _, logp, _ = nn.softmax_logprob_entropy(logits, action)
    return action, logp, agent.value(state)


def act(actor: nn.Mlp, state, mode: str = "probabilistic", rng: np.random.Generator | None = None,
        threshold: float = 0.5) -> int:
    """Deployment decision: sample, or update iff P(update) exceeds ``threshold``."""
    p1 = float(nn.softmax(actor(state))[1])
    if mode == "deterministic":
        return int(p1 > threshold)
    if mode != "probabilistic":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("probabilistic mode needs a random generator")
    return int(rng.random() < p1)


class RolloutCollector:
    """Steps an environment with the current policy, carrying the episode
    across successive rollouts and restarting it on ``done``."""

    def __init__(self, env: Env, rng: np.random.Generator):
        self.env = env
        self.rng = rng
        self.state = None
        self._ep_return = 0.0
        self._ep_len = 0

    def collect(self, agent: Agent, n_steps: int) -> tuple[RolloutBuffer, list[tuple[float, int]]]:
        if n_steps < 1:
            raise ConfigError("rollout length must be >= 1")
        if self.state is None:
            self.state = self.env.reset()
        buf = RolloutBuffer()
        episodes = []
        for _ in range(n_steps):
            action, logp, value = sample_action(agent, self.state, self.rng)
            nxt, r, done = self.env.step(action)
            buf.add(Transition(self.state, action, logp, float(r), value, bool(done)))
            self._ep_return += r
            self._ep_len += 1
            if done:
                episodes.append((self._ep_return, self._ep_len))
                self._ep_return, self._ep_len = 0.0, 0
                nxt = self.env.reset()
            self.state = nxt
        return buf, episodes

    def bootstrap_value(self, agent: Agent) -> float:
        return agent.value(self.state)


def collect_rollout(env: Env, agent: Agent, n_steps: int, rng: np.random.Generator) -> RolloutBuffer:
    collector = RolloutCollector(env, rng)
    buf, _ = collector.collect(agent, n_steps)
    return buf


def policy_loss_and_grad(actor: nn.Mlp, states, actions, old_log_probs, advantages,
                         clip: float, entropy_coef: float = 0.0):
    """Clipped-surrogate loss, its gradients, and diagnostics for one mini-batch."""
    logits, cache = nn.forward(actor, states)
    probs, logp, entropy = nn.softmax_logprob_entropy(logits, actions)
    ratio = np.exp(logp - old_log_probs)
    surr = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantages
    objective = np.minimum(surr, clipped)
    assert objective.mean() <= surr.mean() + 1e-12
    G = len(actions)
    loss = -objective.mean() - entropy_coef * entropy.mean()

    onehot = np.zeros_like(probs)
    onehot[np.arange(G), actions] = 1.0
    active = (surr <= clipped).astype(float)
    dlogp = -(ratio * advantages * active) / G
    dlogits = dlogp[:, None] * (onehot - probs)
    if entropy_coef:
        logp_all = np.log(np.clip(probs, 1e-300, None))
        dH = -probs * (logp_all + entropy[:, None])
        dlogits -= entropy_coef * dH / G
    grads = nn.backward(actor, cache, dlogits)
    info = {
        "ratio": ratio,
        "entropy": float(entropy.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "approx_kl": float(np.mean(old_log_probs - logp)),
    }
    return float(loss), grads, info


def value_loss_and_grad(critic: nn.Mlp, states, returns, value_coef: float):
    values, cache = nn.forward(critic, states)
    diff = values[:, 0] - returns
    loss = value_coef * float(np.mean(diff ** 2))
    dv = (value_coef * 2.0 * diff / diff.size)[:, None]
    return loss, nn.backward(critic, cache, dv)


def ppo_update(agent: Agent, buffer: RolloutBuffer, config: PpoConfig,
               rng: np.random.Generator) -> dict:
    """K epochs of shuffled mini-batch Adam steps on actor and critic."""
    if buffer.advantages is None:
        raise RuntimeError("finalize the buffer before updating")
    states, actions, old_logp, _, _, _ = buffer.arrays()
    adv = buffer.advantages.copy()
    if config.normalize_advantage and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    returns = buffer.returns
    n, G = len(buffer), config.minibatch_size
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": [],
             "approx_kl": []}
    first_ratio_dev = None
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, G):
            idx = order[start:start + G]
            ploss, pgrads, info = policy_loss_and_grad(
                agent.actor, states[idx], actions[idx], old_logp[idx], adv[idx],
                config.clip, config.entropy_coef)
            if first_ratio_dev is None:
                first_ratio_dev = float(np.max(np.abs(info["ratio"] - 1.0)))
            vloss, vgrads = value_loss_and_grad(agent.critic, states[idx], returns[idx],
                                                config.value_coef)
            nn.adam_step(agent.actor, pgrads, agent.actor_opt)
            nn.adam_step(agent.critic, vgrads, agent.critic_opt)
            stats["policy_loss"].append(ploss)
            stats["value_loss"].append(vloss)
            for key in ("entropy", "clip_fraction", "approx_kl"):
                stats[key].append(info[key])
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    out["first_ratio_dev"] = first_ratio_dev
    return out


@dataclass
class TrainResult:
    agent: Agent
    reward_curve: list[dict]
    steps: int


def train_static(env: Env, config: PpoConfig, total_steps: int, seed: int,
                 agent: Agent | None = None, time_scale: float = 1.0,
                 rho: float = 0.0) -> TrainResult:
    """Collect / estimate advantages / optimise until ``total_steps`` are used.

    The number of iterations is ``ceil(total_steps / rollout_length)``.
    """
    if total_steps < config.rollout_length:
        raise ConfigError(f"total_steps={total_steps} is smaller than one rollout "
                          f"({config.rollout_length})")
    init_rng = np.random.default_rng([seed, 0])
    act_rng = np.random.default_rng([seed, 1])
    shuffle_rng = np.random.default_rng([seed, 2])
    if agent is None:
        agent = Agent.create(env.state_dim, config, init_rng, time_scale, rho)
    collector = RolloutCollector(env, act_rng)
    curve = []
    iterations = math.ceil(total_steps / config.rollout_length)
    for it in range(1, iterations + 1):
        buf, episodes = collector.collect(agent, config.rollout_length)
        buf.finalize(collector.bootstrap_value(agent), config.gamma, config.gae_lambda)
        stats = ppo_update(agent, buf, config, shuffle_rng)
        row = {
            "iteration": it,
            "mean_episode_reward": float(np.mean([e[0] for e in episodes])) if episodes else float("nan"),
            "mean_episode_length": float(np.mean([e[1] for e in episodes])) if episodes else float("nan"),
            "mean_update_prob": float(np.mean([t.action for t in buf.transitions])),
            **{k: stats[k] for k in ("policy_loss", "value_loss", "entropy")},
        }
        curve.append(row)
        log.debug("iteration %d: %s", it, row)
    return TrainResult(agent, curve, iterations * config.rollout_length)


class DynamicPolicy:
    """Deployment-time learner: acts probabilistically and runs a PPO
    update every ``config.rollout_length`` real decisions."""

    def __init__(self, agent: Agent, config: PpoConfig, action_rng: np.random.Generator,
                 update_rng: np.random.Generator):
        self.agent = agent.copy()
        self.agent.configure(config)
        self.config = config
        self.action_rng = action_rng
        self.update_rng = update_rng
        self.buffer = RolloutBuffer()
        self.counter = 0
        self.n_updates = 0
        self._pending = None

    def decide(self, state) -> int:
        action, logp, value = sample_action(self.agent, state, self.action_rng)
        self._pending = (np.asarray(state, dtype=float), action, logp, value)
        return action

    def observe_reward(self, reward: float) -> bool:
        """Store the transition; returns True when a policy update ran."""
        state, action, logp, value = self._pending
        self._pending = None
        self.buffer.add(Transition(state, action, logp, float(reward), value, False))
        self.counter += 1
        if self.counter < self.config.rollout_length:
            return False
        # the next real state is not known yet; bootstrap from the latest one
        self.buffer.finalize(value, self.config.gamma, self.config.gae_lambda)
        ppo_update(self.agent, self.buffer, self.config, self.update_rng)
        self.buffer = RolloutBuffer()
        self.counter = 0
        self.n_updates += 1
        return True


@dataclass
class DynamicTrace:
    actions: list[int]
    rewards: list[float]
    utilities: list[float]
    policy_updates: int
    agent: Agent


def dynamic_update_loop(first_batch: Batch, batches: Iterable[Batch], agent: Agent,
                        config: PpoConfig = DYNAMIC_DEFAULTS, seed: int = 0,
                        rho: float | None = None, threshold: float = 0.5) -> DynamicTrace:
    """Run the pretrained policy over real batches, learning as it goes."""
    rho = agent.rho if rho is None else rho
    loop = MaintenanceLoop(first_batch, agent.time_scale, rho=rho, threshold=threshold)
    policy = DynamicPolicy(agent, config, np.random.default_rng([seed, 0]),
                           np.random.default_rng([seed, 1]))
    for batch in batches:
        state = loop.observe(batch)
        r = loop.apply(policy.decide(state))
        policy.observe_reward(r)
    return DynamicTrace(loop.ledger.actions, loop.rewards, loop.ledger.utilities,
                        policy.n_updates, policy.agent)


def config_dict(config: PpoConfig) -> dict:
    return asdict(config)


def with_overrides(config: PpoConfig, **kwargs) -> PpoConfig:
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
