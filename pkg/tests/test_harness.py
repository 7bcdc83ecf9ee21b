import math

import numpy as np
import pytest

from retrain_rl.drift_env import ConfigError
from retrain_rl.harness import (
    ExperimentConfig,
    ResultTable,
    build_scenario,
    calibrate,
    choose_rho,
    emit_outputs,
    evaluate_run,
    run_comparison,
    summarize,
    train_agent,
    tune_rho,
)

TINY = dict(T=12, n=300, runs=3, train_steps=256, rollout_length=128, minibatch_size=32,
            epochs=2, train_horizon=10)


@pytest.fixture(scope="module")
def tiny():
    cfg = ExperimentConfig(**TINY)
    scenario = build_scenario(cfg)
    res = train_agent(cfg, scenario)
    return cfg, scenario, res, run_comparison(cfg, res.agent, scenario)


def test_config_round_trip_and_comments():
    cfg = ExperimentConfig(T=37, mu_grid=(0.1, 0.3), scenario="misspecified")
    assert ExperimentConfig.loads(cfg.dumps()) == cfg
    text = "# a comment\nT = 9   # trailing\nresample_train_covariates = yes\n"
    got = ExperimentConfig.loads(text)
    assert got.T == 9 and got.resample_train_covariates is True


@pytest.mark.parametrize("text", ["T = 1", "n = 1", "mu_grid = ", "mu_grid = -0.1",
                                  "bogus = 3", "T 5", "scenario = other"])
def test_config_rejects_invalid(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.loads(text)


def test_scenarios():
    ws = build_scenario(ExperimentConfig(n=100))
    assert ws.assumed is ws.truth and ws.first_batch.covariates.shape == (100, 5)
    ms = build_scenario(ExperimentConfig(n=100, scenario="misspecified"))
    assert ms.truth.extended_terms is not None
    assert ms.assumed.extended_terms is None
    assert ms.assumed_drift.jump_prob == 0.0
    assert ms.assumed_drift.step_std == pytest.approx(ms.true_drift.step_std / 2)
    assert ms.first_batch.covariates.shape == (100, 5)


def test_table_shape_and_structural_identities(tiny):
    cfg, _, _, result = tiny
    table = result.table
    assert len(table.rows) == 8 * len(cfg.mu_grid)
    never = [table.get("never", m)["mean_utility"] for m in cfg.mu_grid]
    assert max(never) - min(never) == 0.0
    always = table.get("always", cfg.mu_grid[0])
    assert always["mean_updates"] == cfg.T - 1
    for m in cfg.mu_grid:
        expected = always["mean_utility"] - (m - cfg.mu_grid[0]) * (cfg.T - 1)
        assert table.get("always", m)["mean_utility"] == pytest.approx(expected, abs=1e-9)


def test_mu_sweep_and_stderr_recomputed_from_traces(tiny):
    cfg, _, _, result = tiny
    for name in ("ppo_static", "ddm", "random"):
        for mu in cfg.mu_grid:
            u = [sum(tr[name].utilities) - mu * sum(tr[name].actions[1:]) for tr in result.traces]
            row = result.table.get(name, mu)
            assert row["mean_utility"] == pytest.approx(np.mean(u), abs=1e-9)
            assert row["stderr"] == pytest.approx(np.std(u, ddof=1) / math.sqrt(cfg.runs),
                                                  abs=1e-12)


def test_calibration(tiny):
    _, _, _, result = tiny
    c = result.calibration
    assert c.mean_updates == pytest.approx(
        np.mean([tr["ppo_static"].n_updates for tr in result.traces]))
    got = calibrate(4.6, 11)
    assert got.random_p == pytest.approx(0.46) and got.spaced_k == 4
    assert calibrate(50.0, 11).spaced_k == 10


def test_same_stream_digests(tiny):
    cfg, scenario, res, _ = tiny
    traces = evaluate_run(cfg, scenario, res.agent, 0, ("never", "always", "ddm"))
    assert len({t.stream_digest for t in traces.values()}) == 1
    other = evaluate_run(cfg, scenario, res.agent, 1, ("never",))
    assert other["never"].stream_digest != traces["never"].stream_digest


def test_static_and_dynamic_agree_before_first_policy_update(tiny):
    _, _, _, result = tiny
    # T - 1 = 11 decisions < 32, so the dynamic policy never updates
    for tr in result.traces:
        assert tr["ppo_dynamic"].actions == tr["ppo_static"].actions


def test_outputs_round_trip(tiny, tmp_path):
    cfg, _, res, result = tiny
    paths = emit_outputs(result, tmp_path, res.reward_curve)
    back = ResultTable.from_csv(paths["results_csv"].read_text())
    assert back.rows == result.table.rows
    md = paths["results_md"].read_text().splitlines()
    body = [l for l in md if l.startswith("| ") and not l.startswith("| Method")]
    assert len(body) == 8
    assert md[2].count("mu = ") == len(cfg.mu_grid)
    assert ExperimentConfig.loads(paths["config"].read_text()) == cfg
    assert len(list((tmp_path / "traces").glob("run_*.csv"))) == cfg.runs
    assert (tmp_path / "reward_curve.csv").exists()


def test_single_run_warns_and_reports_zero_stderr(tiny):
    cfg, _, _, result = tiny
    with pytest.warns(UserWarning):
        table = summarize(result.traces[:1], cfg.mu_grid)
    assert all(r["stderr"] == 0.0 for r in table.rows)


def test_workers_do_not_change_results(tiny):
    cfg, scenario, res, result = tiny
    again = run_comparison(cfg.replace(workers=2), res.agent, scenario)
    assert again.table.to_csv() == result.table.to_csv()


def test_choose_rho_majority_and_ties():
    rows = []
    utils = {0.01: [5, 5, 1], 0.02: [4, 6, 2]}
    for rho, us in utils.items():
        for mu, u in zip((0.1, 0.2, 0.3), us):
            rows.append({"strategy": f"rho={rho!r}", "mu": mu, "mean_utility": u,
                         "stderr": 0.0, "mean_updates": 0.0})
    table = ResultTable((0.1, 0.2, 0.3), rows)
    assert choose_rho(table, (0.01, 0.02)) == 0.02
    rows[2]["mean_utility"] = 3  # 0.01 now wins mu = 0.3: 2 wins vs 1
    assert choose_rho(table, (0.01, 0.02)) == 0.01
    tied = ResultTable((0.1,), [dict(r, mu=0.1) for r in rows if r["mu"] == 0.1][:1]
                       + [{"strategy": "rho=0.02", "mu": 0.1, "mean_utility": 5,
                           "stderr": 0.0, "mean_updates": 0.0}])
    assert choose_rho(tied, (0.01, 0.02)) == 0.01


def test_tune_rho_single_and_grid():
    cfg = ExperimentConfig(**TINY)
    single = tune_rho(cfg, rho_grid=(0.03,))
    assert single.chosen_rho == 0.03 and not single.pilot.rows
    res = tune_rho(cfg, rho_grid=(0.01, 0.02), pilot_runs=2)
    assert res.chosen_rho in (0.01, 0.02)
    assert set(res.curves) == {0.01, 0.02}
    assert len(res.pilot.rows) == 2 * len(cfg.mu_grid)
    with pytest.raises(ConfigError):
        tune_rho(cfg, rho_grid=())
