"""Experiment driver: seeded runs, the evaluation protocol, limit sweeps,
and CSV/SVG reporting.

Outputs are a pure function of (config, seeds): no timestamps or machine
state enter any artifact, so re-running a config reproduces every file byte
for byte.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import cpq as cpq_mod
from . import serial, svg, tabular
from .baselines import NaiveDualActorCritic, SafeBehaviorCloning
from .config import ExperimentConfig
from .cpq import CPQ
from .data import OfflineDataset, generate_dataset, load_dataset
from .envs import discounted_rollout, make_env
from .ood import BehaviorCVAE

OUTPUT_ROOT_ENV_VAR = "CPQLAB_OUTPUT_ROOT"


@dataclass(frozen=True)
class EvalReport:
    return_mean: float
    return_std: float
    cost_mean: float
    cost_std: float
    violation: bool
    step: int = 0
    seed: int = 0


def evaluate_policy(env, policy, episodes: int, gamma: float,
                    rng: np.random.Generator, limit: float,
                    horizon: int | None = None, step: int = 0,
                    seed: int = 0) -> EvalReport:
    """Aggregate discounted return/cost over fresh evaluation episodes."""
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    horizon = env.horizon if horizon is None else horizon
    returns, costs = [], []
    for _ in range(episodes):
        ret, cost = discounted_rollout(env, policy, gamma, horizon, rng)
        returns.append(ret)
        costs.append(cost)
    r = np.asarray(returns)
    c = np.asarray(costs)
    return EvalReport(return_mean=float(r.mean()), return_std=float(r.std()),
                      cost_mean=float(c.mean()), cost_std=float(c.std()),
                      violation=bool(c.mean() > limit), step=step, seed=seed)


def estimator_policy(estimator, env, stochastic: bool = False):
    """Adapt a fitted estimator into an environment policy callable."""
    def policy(state, rng):
        obs = env.observe(state)
        if stochastic:
            action = estimator.sample(obs, rng)[0]
        else:
            action = estimator.predict(obs)[0]
        return env.decode_action(action)
    return policy


def matrix_policy(matrix: np.ndarray):
    """Environment policy from an explicit tabular action distribution."""
    def policy(state, rng):
        return int(rng.choice(matrix.shape[1], p=matrix[state]))
    return policy


def _eval_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.PCG64(
        np.random.SeedSequence(entropy=987654321, spawn_key=(seed, step))))


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_value(row.get(k, "")) for k in columns})
    path.write_text(buffer.getvalue(), encoding="utf-8")


def _csv_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, float):
        return repr(v)
    return v


def resolve_out_dir(config: ExperimentConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV_VAR)
    out = Path(config.out_dir)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _load_or_generate_dataset(config: ExperimentConfig, env) -> OfflineDataset:
    if config.dataset_path:
        return load_dataset(config.dataset_path)
    return generate_dataset(env, config.mix_ratio, config.dataset_size,
                            config.dataset_seed, env_id=config.env)


def _vae_params(config: ExperimentConfig) -> dict:
    return dict(latent_dim=config.vae_latent or None, hidden=config.vae_hidden,
                beta=config.vae_beta, steps=config.vae_steps,
                batch_size=config.batch_size, lr=config.vae_lr,
                percentile=config.percentile)


def train_behavior_model(dataset: OfflineDataset, config: ExperimentConfig,
                         seed: int) -> BehaviorCVAE:
    return BehaviorCVAE(random_state=seed, **_vae_params(config)).fit(dataset)


def _cpq_params(config: ExperimentConfig) -> dict:
    return dict(limit=config.limit, gamma=config.gamma, steps=config.steps,
                batch_size=config.batch_size, critic_lr=config.critic_lr,
                actor_lr=config.actor_lr, alpha_lr=config.alpha_lr,
                tau=config.tau, n_ood_samples=config.n_ood_samples,
                target_action_samples=config.target_action_samples,
                limit_cost_factor=config.limit_cost_factor,
                actor_hidden=config.actor_hidden,
                critic_hidden=config.critic_hidden)


def _train_seed(config: ExperimentConfig, env, dataset: OfflineDataset,
                vae: BehaviorCVAE | None, seed: int, seed_dir: Path) -> list[dict]:
    """Train one seed, evaluating on schedule; returns the eval rows."""
    eval_rows: list[dict] = []
    horizon = env.horizon

    def evaluate(estimator, step):
        policy = estimator_policy(estimator, env, stochastic=config.eval_stochastic)
        report = evaluate_policy(env, policy, config.eval_episodes, config.gamma,
                                 _eval_rng(seed, step), config.limit,
                                 horizon=horizon, step=step, seed=seed)
        row = {"step": step, "seed": seed,
               "return_mean": report.return_mean, "return_std": report.return_std,
               "cost_mean": report.cost_mean, "cost_std": report.cost_std,
               "violation": report.violation}
        eval_rows.append(row)
        return row

    def on_schedule(step):
        return (step + 1) % config.eval_interval == 0

    if config.algorithm == "cpq":
        if config.steps < 1:
            raise ValueError("cpq needs steps >= 1 inside an experiment")
        if vae is None:
            vae = train_behavior_model(dataset, config, seed)
        agent = CPQ(random_state=seed, **_cpq_params(config))

        def hook(step, est):
            if on_schedule(step) or step == config.steps - 1:
                row = evaluate(est, step + 1)
                row["alpha"] = est.alpha_
        agent.fit(dataset, vae, step_hook=hook)
        cpq_mod.save_agent(agent, seed_dir / "checkpoint.jsonl")
        trace = agent.metrics_
    elif config.algorithm == "bc-safe":
        agent = SafeBehaviorCloning(steps=config.bc_steps, batch_size=config.batch_size,
                                    lr=config.bc_lr, hidden=config.actor_hidden,
                                    random_state=seed)
        agent.fit(dataset)
        evaluate(agent, config.bc_steps)
        _save_actor(agent, seed_dir / "checkpoint.jsonl")
        trace = [{"step": i, "nll": v} for i, v in
                 enumerate(agent.loss_trace_) if i % 100 == 0]
    elif config.algorithm == "naive":
        agent = NaiveDualActorCritic(
            limit=config.limit, gamma=config.gamma, steps=config.naive_steps,
            batch_size=config.batch_size, critic_lr=config.critic_lr,
            actor_lr=config.actor_lr, lambda_lr=config.lambda_lr, tau=config.tau,
            xi=config.xi, actor_hidden=config.actor_hidden,
            critic_hidden=config.critic_hidden, random_state=seed)
        agent.fit(dataset)
        row = evaluate(agent, config.naive_steps)
        row["alpha"] = agent.lambda1_
        _save_actor(agent, seed_dir / "checkpoint.jsonl")
        trace = agent.metrics_
    elif config.algorithm == "tabular-cpq":
        spec = env.tabular_spec()
        alpha = None if config.alpha < 0 else config.alpha
        result = tabular.tabular_cpq(spec, dataset, eps=config.eps, alpha=alpha,
                                     limit=config.limit)
        report = evaluate_policy(env, matrix_policy(result.policy),
                                 config.eval_episodes, config.gamma,
                                 _eval_rng(seed, 0), config.limit,
                                 horizon=horizon, step=0, seed=seed)
        eval_rows.append({"step": 0, "seed": seed,
                          "return_mean": report.return_mean,
                          "return_std": report.return_std,
                          "cost_mean": report.cost_mean,
                          "cost_std": report.cost_std,
                          "violation": report.violation,
                          "alpha": result.alpha})
        records = [{"name": "policy", "shape": list(result.policy.shape),
                    "data": result.policy.reshape(-1).tolist()}]
        serial.dump_records(seed_dir / "checkpoint.jsonl", kind="tabular-policy",
                            meta={"limit": config.limit, "eps": config.eps},
                            records=records)
        trace = [{"step": 0, "iterations": result.iterations,
                  "value_gap": result.report.value_gap,
                  "bound": result.report.bound}]
    else:  # pragma: no cover - guarded by ExperimentConfig
        raise ValueError(config.algorithm)

    if trace:
        columns = list(trace[0].keys())
        _write_csv(seed_dir / "train_metrics.csv", trace, columns)
    eval_columns = ["step", "seed", "return_mean", "return_std", "cost_mean",
                    "cost_std", "violation", "alpha"]
    _write_csv(seed_dir / "metrics.csv", eval_rows, eval_columns)
    return eval_rows


def _save_actor(agent, path) -> None:
    records = []
    for i, (w, b) in enumerate(agent.actor_.layers):
        records.append({"name": f"actor_.w{i}", "shape": list(w.shape),
                        "data": w.reshape(-1).tolist()})
        records.append({"name": f"actor_.b{i}", "shape": list(b.shape),
                        "data": b.reshape(-1).tolist()})
    meta = {"obs_dim": agent.obs_dim_, "act_dim": agent.act_dim_,
            "estimator": type(agent).__name__}
    serial.dump_records(path, kind="actor-policy", meta=meta, records=records)


def run_experiment(config: ExperimentConfig) -> Path:
    """Full protocol: data, behavior model, per-seed training and evaluation,
    aggregate CSV summary and the learning-curve SVG."""
    out_dir = resolve_out_dir(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
    env = make_env(config.env, limit=config.limit, gamma=config.gamma)
    dataset = _load_or_generate_dataset(config, env)

    vae = None
    if config.algorithm == "cpq" and config.vae_shared:
        vae = train_behavior_model(dataset, config, config.dataset_seed)

    all_rows: list[dict] = []
    for seed in config.seeds:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        all_rows.extend(_train_seed(config, env, dataset, vae, seed, seed_dir))

    # aggregate across seeds at matching steps
    steps = sorted({row["step"] for row in all_rows})
    agg_rows = []
    for step in steps:
        at_step = [r for r in all_rows if r["step"] == step]
        agg_rows.append({
            "step": step,
            "n_seeds": len(at_step),
            "return_mean": float(np.mean([r["return_mean"] for r in at_step])),
            "return_std": float(np.std([r["return_mean"] for r in at_step])),
            "cost_mean": float(np.mean([r["cost_mean"] for r in at_step])),
            "cost_std": float(np.std([r["cost_mean"] for r in at_step])),
            "violation": bool(np.mean([r["cost_mean"] for r in at_step])
                              > config.limit),
        })
    _write_csv(out_dir / "summary.csv", agg_rows,
               ["step", "n_seeds", "return_mean", "return_std", "cost_mean",
                "cost_std", "violation"])
    svg.learning_curve_svg(
        out_dir / "curves.svg",
        [row["step"] for row in agg_rows],
        [row["return_mean"] for row in agg_rows],
        [row["cost_mean"] for row in agg_rows],
        config.limit,
        title=f"{config.algorithm} on {config.env} (limit {config.limit:g})")
    _check_outputs_finite(agg_rows)
    return out_dir


def _check_outputs_finite(rows: list[dict]) -> None:
    for row in rows:
        for key, value in row.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise ArithmeticError(f"non-finite value in report column {key!r}")


def sweep_limits(config: ExperimentConfig, limits: list[float]) -> Path:
    """Re-run the experiment per cost limit on the same data and seeds."""
    if not limits:
        raise ValueError("limits must be nonempty")
    out_dir = resolve_out_dir(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for limit in sorted(limits):
        sub = replace(config, limit=float(limit),
                      out_dir=str(Path(config.out_dir) / f"limit_{limit:g}"))
        run_dir = run_experiment(sub)
        with (run_dir / "summary.csv").open(encoding="utf-8") as fh:
            final = list(csv.DictReader(fh))[-1]
        rows.append({"limit": float(limit),
                     "return_mean": float(final["return_mean"]),
                     "cost_mean": float(final["cost_mean"]),
                     "violation": final["violation"],
                     "run_dir": str(run_dir)})
    _write_csv(out_dir / "sweep.csv", rows,
               ["limit", "return_mean", "cost_mean", "violation", "run_dir"])
    return out_dir
