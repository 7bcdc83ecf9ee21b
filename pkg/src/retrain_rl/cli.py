"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import neural as nn
from .drift_env import ConfigError, derive_rng, generate_batch, generate_drift_path
from .harness import (
    ExperimentConfig,
    build_scenario,
    emit_outputs,
    run_comparison,
    train_agent,
    tune_rho,
    write_reward_curve,
)
from .ppo import Agent

log = logging.getLogger("retrain_rl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# flag -> config field; each flag overrides the config file
_OVERRIDES = {
    "seed": "master_seed",
    "scenario": "scenario",
    "out": "out",
    "T": "T",
    "n": "n",
    "runs": "runs",
    "rho": "rho",
    "train_steps": "train_steps",
    "train_horizon": "train_horizon",
    "workers": "workers",
    "checkpoint": "checkpoint",
    "policy_mode": "policy_mode",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' configuration file")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--scenario", choices=("well_specified", "misspecified"))
    p.add_argument("--out", help="output directory (default results)")
    p.add_argument("--T", type=int, help="evaluation horizon")
    p.add_argument("--n", type=int, help="samples per batch")
    p.add_argument("--runs", type=int, help="number of evaluation runs")
    p.add_argument("--rho", type=float, help="per-update penalty in the training reward")
    p.add_argument("--mu-grid", help="comma-separated update costs")
    p.add_argument("--train-steps", type=int, help="PPO environment steps")
    p.add_argument("--train-horizon", type=int, help="episode length in the simulator")
    p.add_argument("--workers", type=int, help="worker processes for evaluation runs")
    p.add_argument("--checkpoint", help="agent checkpoint directory")
    p.add_argument("--policy-mode", choices=("probabilistic", "deterministic"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="retrain-rl",
                     description="Learn when to retrain a classifier under concept drift.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    p = sub.add_parser("train", help="train the update policy in the simulated environment")
    _common(p)
    p = sub.add_parser("compare", help="benchmark the policy against the baselines")
    _common(p)
    p = sub.add_parser("tune-rho", help="train one policy per rho and pick the best")
    _common(p)
    p.add_argument("--rho-grid", help="comma-separated rho values")
    p.add_argument("--pilot-runs", type=int, help="simulated episodes per rho")
    p = sub.add_parser("simulate", help="write drift and batch traces only")
    _common(p)
    p = sub.add_parser("gradcheck", help="finite-difference check of network gradients")
    p.add_argument("--nets", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    text = "\n".join(args.set)
    changes = {field: getattr(args, flag) for flag, field in _OVERRIDES.items()}
    if args.mu_grid:
        changes["mu_grid"] = _floats(args.mu_grid)
    if getattr(args, "rho_grid", None):
        changes["rho_grid"] = _floats(args.rho_grid)
    if getattr(args, "pilot_runs", None) is not None:
        changes["pilot_runs"] = args.pilot_runs
    cfg = cfg.replace(**changes)
    return ExperimentConfig.loads(text, base=cfg) if text else cfg


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    t0 = time.perf_counter()
    res = train_agent(cfg)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "agent"
    res.agent.save(ckpt)
    write_reward_curve(res.reward_curve, out / "reward_curve.csv")
    (out / "config.txt").write_text(cfg.dumps())
    last = res.reward_curve[-1]
    print(f"trained {res.steps} steps in {time.perf_counter() - t0:.1f}s; "
          f"final update probability {last['mean_update_prob']:.3f}; checkpoint {ckpt}")
    return 0


def cmd_compare(cfg: ExperimentConfig) -> int:
    scenario = build_scenario(cfg)
    curve = None
    if cfg.checkpoint:
        agent = Agent.load(cfg.checkpoint, cfg.ppo)
    else:
        log.info("no checkpoint given; training first")
        res = train_agent(cfg, scenario)
        agent, curve = res.agent, res.reward_curve
    result = run_comparison(cfg, agent, scenario)
    paths = emit_outputs(result, cfg.out, curve)
    print(paths["results_md"].read_text(), end="")
    print(f"results written to {cfg.out}")
    return 0


def cmd_tune_rho(cfg: ExperimentConfig) -> int:
    res = tune_rho(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for rho, curve in res.curves.items():
        write_reward_curve(curve, out / f"reward_curve_rho_{rho!r}.csv")
    if res.pilot.rows:
        (out / "pilot.csv").write_text(res.pilot.to_csv())
        (out / "pilot.md").write_text(res.pilot.to_markdown("Pilot utilities per rho"))
        print(res.pilot.to_markdown(), end="")
    (out / "config.txt").write_text(cfg.dumps())
    print(f"chosen rho = {res.chosen_rho!r}")
    return 0


def cmd_simulate(cfg: ExperimentConfig) -> int:
    """Drift path and per-batch summaries of every evaluation run."""
    scenario = build_scenario(cfg)
    out = Path(cfg.out) / "simulate"
    out.mkdir(parents=True, exist_ok=True)
    from .harness import _Stream

    k = scenario.truth.as_vector().size
    for run in range(cfg.runs):
        path = generate_drift_path(scenario.truth, scenario.true_drift, cfg.T,
                                   derive_rng(cfg.master_seed, _Stream.RUN, run, _Stream.DRIFT))
        with open(out / f"run_{run:03d}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["t", *[f"theta_{i}" for i in range(k)], "positive_rate", "digest"])
            for t in range(1, cfg.T + 1):
                rng = derive_rng(cfg.master_seed, _Stream.RUN, run, _Stream.BATCH, t)
                b = generate_batch(path[t - 1], cfg.n, rng, time_index=t,
                                   observed_dim=scenario.observed_dim)
                w.writerow([t, *map(repr, path.vectors[t - 1].tolist()),
                            repr(float(np.mean(b.labels))), b.digest()])
    (Path(cfg.out) / "config.txt").write_text(cfg.dumps())
    print(f"wrote {cfg.runs} traces to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for i in range(args.nets):
        dims = (int(rng.integers(2, 15)), int(rng.integers(2, 20)), int(rng.integers(2, 20)),
                int(rng.integers(1, 3)))
        net = nn.Mlp.init(dims, rng)
        x = rng.standard_normal((4, dims[0]))
        err = nn.gradient_check(net, nn.linear_probe_loss(x, rng.standard_normal((4, dims[-1]))))
        print(f"net {i} {dims}: max relative error {err:.2e}")
        worst = max(worst, err)
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst relative error {worst:.2e} (tolerance {args.tol:g})")
    return 0 if ok else 2


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "tune-rho": cmd_tune_rho,
            "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help()
        return 0
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 0
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](cfg)
    except (OSError, ConfigError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
