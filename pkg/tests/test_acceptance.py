"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-5 share two desk-scale experiments (T = 100, n = 2000, 20 runs,
100k training steps), one per scenario, built once per session.
"""

import math
import time

import numpy as np
import pytest

from conftest import record
from retrain_rl import baselines as bl
from retrain_rl import classifier as clf
from retrain_rl import neural as nn
from retrain_rl.cli import main as cli_main
from retrain_rl.drift_env import DgpParams, DriftConfig, derive_rng, generate_batch, initial_params
from retrain_rl.harness import ExperimentConfig, build_scenario, run_comparison, train_agent
from retrain_rl.mdp import SimulatedDriftEnv, cumulative_utility
from retrain_rl.ppo import Agent, PpoConfig, compute_gae, policy_loss_and_grad, train_static, \
    value_loss_and_grad

DESK = dict(T=100, n=2000, runs=20, train_steps=100_000, master_seed=0)
MU_CHECK = 0.05


def _desk(scenario):
    cfg = ExperimentConfig(scenario=scenario, **DESK)
    t0 = time.perf_counter()
    sc = build_scenario(cfg)
    agent = train_agent(cfg, sc).agent
    result = run_comparison(cfg, agent, sc)
    return cfg, result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_well():
    return _desk("well_specified")


@pytest.fixture(scope="session")
def desk_mis():
    return _desk("misspecified")


def _row(result, name, mu):
    return result.table.get(name, mu)


# 1. structural table identities

def test_criterion_01_structural_identities(desk_well):
    cfg, result, _ = desk_well
    worst = 0.0
    for mu in cfg.mu_grid:
        for name in ("never", "always"):
            u = [cumulative_utility(tr[name].utilities, tr[name].actions, mu)
                 for tr in result.traces]
            worst = max(worst, abs(np.mean(u) - _row(result, name, mu)["mean_utility"]))
    never = [_row(result, "never", mu)["mean_utility"] for mu in cfg.mu_grid]
    never_spread = max(never) - min(never)
    base = _row(result, "always", cfg.mu_grid[0])
    affine = max(abs(_row(result, "always", mu)["mean_utility"]
                     - (base["mean_utility"] - (mu - cfg.mu_grid[0]) * (cfg.T - 1)))
                 for mu in cfg.mu_grid)
    ok = (never_spread <= 1e-9 and affine <= 1e-9 and worst <= 1e-9
          and base["mean_updates"] == cfg.T - 1)
    assert record(1, ok, f"never spread {never_spread:.1e}, always affine error {affine:.1e}, "
                         f"ledger recompute error {worst:.1e}, always updates "
                         f"{base['mean_updates']:.0f}")


# 2. static policy beats calibrated schedules at desk scale

def test_criterion_02_ordering_vs_calibrated(desk_well):
    cfg, result, wall = desk_well
    s = _row(result, "ppo_static", MU_CHECK)
    parts, ok = [], True
    for name in ("random", "equally_spaced"):
        o = _row(result, name, MU_CHECK)
        gap = s["mean_utility"] - o["mean_utility"]
        pooled = math.hypot(s["stderr"], o["stderr"])
        ok &= gap > pooled
        parts.append(f"{name} gap {gap:.2f} (pooled se {pooled:.2f})")
    ok &= wall < 20 * 60
    assert record(2, ok, f"mu={MU_CHECK}: " + ", ".join(parts) + f"; wall {wall:.0f}s")


# 3. never vs always under drift

def test_criterion_03_never_vs_always(desk_well):
    _, result, _ = desk_well
    never = _row(result, "never", 0.01)["mean_utility"]
    always = _row(result, "always", 0.01)["mean_utility"]
    assert record(3, always - never >= 20,
                  f"never {never:.2f}, always {always:.2f}, gap {always - never:.2f} (need >= 20)")


# 4. dynamic >= static under misspecification

def test_criterion_04_dynamic_vs_static(desk_mis):
    cfg, result, _ = desk_mis
    wins = []
    for mu in cfg.mu_grid:
        d = _row(result, "ppo_dynamic", mu)["mean_utility"]
        s = _row(result, "ppo_static", mu)["mean_utility"]
        wins.append(d >= s)
    diffs = ", ".join(f"{_row(result, 'ppo_dynamic', mu)['mean_utility'] - _row(result, 'ppo_static', mu)['mean_utility']:+.2f}"
                      for mu in cfg.mu_grid)
    assert record(4, sum(wins) >= 4, f"dynamic - static per mu: {diffs}; "
                                      f"{sum(wins)}/{len(wins)} ordered (need >= 4)")


# 5. update counts under misspecification

def test_criterion_05_update_counts(desk_mis):
    cfg, result, _ = desk_mis
    mu = cfg.mu_grid[0]
    static = _row(result, "ppo_static", mu)["mean_updates"]
    dynamic = _row(result, "ppo_dynamic", mu)["mean_updates"]
    hddm = _row(result, "hddm", mu)["mean_updates"]
    ok = all(0 < u < cfg.T - 1 and u < hddm for u in (static, dynamic))
    assert record(5, ok, f"mean updates static {static:.2f}, dynamic {dynamic:.2f}, "
                         f"HDDM {hddm:.2f} (T-1 = {cfg.T - 1})")


# 6. gradient oracle on the actual training losses

def test_criterion_06_gradient_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    state_dim = 14
    for seed in range(5):
        rng = np.random.default_rng(seed)
        agent = Agent.create(state_dim, PpoConfig(), rng)
        # move the output layers away from their near-zero initial scale
        agent.actor.weights[-1] *= 50.0
        G = 16
        states = rng.standard_normal((G, state_dim))
        actions = rng.integers(0, 2, G)
        old = rng.uniform(-1.2, -0.2, G)
        adv = rng.standard_normal(G)
        returns = rng.standard_normal(G)

        def actor_loss(net):
            loss, grads, _ = policy_loss_and_grad(net, states, actions, old, adv, 0.2, 0.01)
            return loss, grads

        worst = max(worst, nn.gradient_check(agent.actor, actor_loss),
                    nn.gradient_check(agent.critic,
                                      lambda net: value_loss_and_grad(net, states, returns, 0.5)))
    elapsed = time.perf_counter() - t0
    assert record(6, worst < 1e-4 and elapsed < 30,
                  f"worst relative error {worst:.2e} over 5 actor/critic pairs in {elapsed:.1f}s")


# 7. GAE oracle

def _brute_force_advantages(rewards, values, dones, last_value, gamma):
    n = len(rewards)
    adv = np.zeros(n)
    for t in range(n):
        ret, disc, k = 0.0, 1.0, t
        while True:
            ret += disc * rewards[k]
            disc *= gamma
            if dones[k]:
                break
            k += 1
            if k == n:
                ret += disc * last_value
                break
        adv[t] = ret - values[t]
    return adv


def test_criterion_07_gae_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 60))
        rewards, values = rng.standard_normal(n), rng.standard_normal(n)
        dones = rng.random(n) < 0.15
        last_value = float(rng.standard_normal())
        gamma = float(rng.uniform(0.5, 1.0))
        adv, _ = compute_gae(rewards, values, dones, last_value, gamma, 1.0)
        ref = _brute_force_advantages(rewards, values, dones, last_value, gamma)
        worst = max(worst, float(np.max(np.abs(adv - ref))))
    assert record(7, worst <= 1e-10, f"max |GAE - brute force| {worst:.1e} over 100 buffers")


# 8. classifier oracle

def _gradient_descent_fit(batch, ridge=1e-8, tol=1e-11, max_iter=20_000):
    """Nesterov-accelerated gradient descent on the penalised mean log-loss."""
    Z = np.hstack([np.ones((len(batch), 1)), batch.covariates])
    y = batch.labels.astype(float)
    n = len(y)
    L = np.linalg.eigvalsh(Z.T @ Z)[-1] / (4 * n) + ridge / n
    beta = prev = np.zeros(Z.shape[1])
    for k in range(1, max_iter + 1):
        look = beta + (k - 1) / (k + 2) * (beta - prev)
        p = 1.0 / (1.0 + np.exp(-(Z @ look)))
        grad = (Z.T @ (p - y) + ridge * look) / n
        prev, beta = beta, look - grad / L
        if np.max(np.abs(grad)) < tol:
            break
    return beta


def test_criterion_08_classifier_oracle():
    theta = DgpParams(0.3, [1.0, -0.7, 0.5, 0.0, -1.2])
    batch = generate_batch(theta, 50_000, derive_rng(8))
    model = clf.fit(batch)
    recovery = float(np.max(np.abs(model.coefficients() - theta.as_vector())))
    gd = _gradient_descent_fit(batch)
    agreement = float(np.max(np.abs(model.coefficients() - gd)))
    assert record(8, recovery <= 0.05 and agreement <= 1e-4,
                  f"max |IRLS - truth| {recovery:.4f} (<= 0.05), "
                  f"max |IRLS - gradient descent| {agreement:.1e} (<= 1e-4)")


# 9. detector oracles

def _alarms(detector, stream):
    count, pos = 0, 0
    while pos < len(stream):
        i = detector.first_drift(stream[pos:])
        if i < 0:
            break
        count += 1
        pos += i + 1
    return count


def test_criterion_09_detector_oracles():
    change, detected = 1000, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        stream = np.r_[rng.random(change) < 0.1, rng.random(1000) < 0.5].astype(int)
        det, pos, hit = bl.DDM(), 0, False
        while pos < len(stream):
            i = det.first_drift(stream[pos:])
            if i < 0:
                break
            at = pos + i
            if change <= at < change + 500:
                hit = True
                break
            if at >= change + 500:
                break
            pos = at + 1
        detected += hit
    # stationary streams at the pre-change error rate of the DDM check
    rate = 0.1
    false_alarms = sum(_alarms(bl.HDDM(), (np.random.default_rng(1000 + s).random(10_000) < rate)
                                .astype(int)) for s in range(100))
    assert record(9, detected == 100 and false_alarms <= 5,
                  f"DDM detected {detected}/100 steps within 500 samples; HDDM false alarms "
                  f"{false_alarms} over 100 stationary streams at error rate {rate} (<= 5)")


# 10. determinism of the compare command

def test_criterion_10_determinism(tmp_path):
    args = ["compare", "--T", "30", "--n", "500", "--runs", "3", "--train-steps", "4096",
            "--seed", "11", "--set", "train_horizon = 30"]
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli_main([*args, "--out", str(out)]) == 0
        outs.append((out / "results.csv").read_bytes())
    same = outs[0] == outs[1]
    assert record(10, same, f"results.csv identical across two executions: {same} "
                            f"({len(outs[0])} bytes)")


# 11. PPO sanity on environments with known optima

class _Rigged:
    """Wraps an environment so that updating always pays +0.1."""

    def __init__(self, env):
        self.env = env
        self.state_dim = env.state_dim

    def reset(self):
        return self.env.reset()

    def step(self, action):
        state, _, done = self.env.step(action)
        return state, 0.1 * action, done


def _mean_update_prob(agent, env, episodes=3):
    probs = []
    for _ in range(episodes):
        state, done = env.reset(), False
        while not done:
            p = agent.update_prob(state)
            probs.append(p)
            state, _, done = env.step(int(p > 0.5))
    return float(np.mean(probs))


def test_criterion_11_ppo_sanity():
    theta = initial_params(derive_rng(0, 1), 5)
    first = generate_batch(theta, 500, derive_rng(0, 2))

    def env(seed):
        return SimulatedDriftEnv(theta, DriftConfig(0.0, 0.0, 0.0), first, 50, derive_rng(0, seed),
                                 rho=0.02, time_scale=50)

    steps = 20 * 2048
    still = train_static(env(3), PpoConfig(), steps, seed=0, time_scale=50, rho=0.02).agent
    rigged = train_static(_Rigged(env(4)), PpoConfig(), steps, seed=0, time_scale=50,
                          rho=0.02).agent
    p_still = _mean_update_prob(still, env(5))
    p_rigged = _mean_update_prob(rigged, _Rigged(env(6)))
    assert record(11, p_still < 0.1 and p_rigged > 0.9,
                  f"no-drift update probability {p_still:.3f} (< 0.1), "
                  f"rigged update probability {p_rigged:.3f} (> 0.9)")
