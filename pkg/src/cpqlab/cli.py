"""Command-line entry point.

Subcommands: gen-data, train-vae, train-cpq, train-bc-safe, train-naive,
verify-theorems, run, sweep.  Exit code 0 only when the command completed
and its invariants held.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import cpq as cpq_mod
from . import ood as ood_mod
from . import tabular
from .baselines import NaiveDualActorCritic, SafeBehaviorCloning
from .config import ExperimentConfig
from .cpq import CPQ
from .data import empirical_behavior_policy, generate_dataset, load_dataset, save_dataset
from .envs import make_env
from .harness import _save_actor, _write_csv, run_experiment, sweep_limits


def _cmd_gen_data(args) -> int:
    env = make_env(args.env)
    dataset = generate_dataset(env, args.mix_ratio, args.size, args.seed,
                               env_id=args.env)
    save_dataset(dataset, args.out)
    counts = dataset.source_counts()
    print(f"wrote {len(dataset)} transitions ({counts['safe']} safe, "
          f"{counts['unsafe']} unsafe) to {args.out}")
    return 0


def _cmd_train_vae(args) -> int:
    dataset = load_dataset(args.data)
    config = _config_from_args(args)
    model = ood_mod.BehaviorCVAE(
        latent_dim=config.vae_latent or None, hidden=config.vae_hidden,
        beta=config.vae_beta, steps=config.vae_steps, batch_size=config.batch_size,
        lr=config.vae_lr, percentile=config.percentile, random_state=args.seed)
    model.fit(dataset)
    ood_mod.save_model(model, args.out)
    print(f"behavior model trained for {config.vae_steps} steps; "
          f"threshold (p{config.percentile:g}) = {model.threshold_:.6g}; "
          f"saved to {args.out}")
    return 0


def _config_from_args(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return ExperimentConfig.from_file(args.config)
    return ExperimentConfig()


def _write_trace(trace: list[dict], out_dir: Path) -> None:
    if trace:
        _write_csv(out_dir / "train_metrics.csv", trace, list(trace[0].keys()))


def _cmd_train_cpq(args) -> int:
    dataset = load_dataset(args.data)
    vae = ood_mod.load_model(args.vae)
    config = _config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agent = CPQ(
        limit=config.limit, gamma=config.gamma, steps=config.steps,
        batch_size=config.batch_size, critic_lr=config.critic_lr,
        actor_lr=config.actor_lr, alpha_lr=config.alpha_lr, tau=config.tau,
        n_ood_samples=config.n_ood_samples,
        target_action_samples=config.target_action_samples,
        limit_cost_factor=config.limit_cost_factor,
        actor_hidden=config.actor_hidden, critic_hidden=config.critic_hidden,
        random_state=args.seed)
    agent.fit(dataset, vae)
    cpq_mod.save_agent(agent, out_dir / "checkpoint.jsonl")
    _write_trace(agent.metrics_, out_dir)
    print(f"trained {config.steps} steps; alpha = {agent.alpha_:.6g}; "
          f"artifacts in {out_dir}")
    return 0


def _cmd_train_bc_safe(args) -> int:
    dataset = load_dataset(args.data)
    config = _config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agent = SafeBehaviorCloning(steps=config.bc_steps, batch_size=config.batch_size,
                                lr=config.bc_lr, hidden=config.actor_hidden,
                                random_state=args.seed)
    agent.fit(dataset)
    _save_actor(agent, out_dir / "checkpoint.jsonl")
    trace = [{"step": i, "nll": v} for i, v in enumerate(agent.loss_trace_)
             if i % 100 == 0]
    _write_trace(trace, out_dir)
    print(f"cloned safe data for {config.bc_steps} steps; artifacts in {out_dir}")
    return 0


def _cmd_train_naive(args) -> int:
    dataset = load_dataset(args.data)
    config = _config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agent = NaiveDualActorCritic(
        limit=config.limit, gamma=config.gamma, steps=config.naive_steps,
        batch_size=config.batch_size, critic_lr=config.critic_lr,
        actor_lr=config.actor_lr, lambda_lr=config.lambda_lr, tau=config.tau,
        xi=config.xi, actor_hidden=config.actor_hidden,
        critic_hidden=config.critic_hidden, random_state=args.seed)
    agent.fit(dataset)
    _save_actor(agent, out_dir / "checkpoint.jsonl")
    _write_trace(agent.metrics_, out_dir)
    print(f"naive dual training done; lambda1 = {agent.lambda1_:.6g}, "
          f"lambda2 = {agent.lambda2_:.6g}; artifacts in {out_dir}")
    return 0


def _cmd_verify_theorems(args) -> int:
    env = make_env(args.spec, limit=args.limit)
    spec = env.tabular_spec()
    dataset = generate_dataset(env, 0.5, args.dataset_size, args.seed,
                               env_id=args.spec)
    pi_beta = empirical_behavior_policy(dataset)
    nu = tabular.default_ood_weights(pi_beta, args.eps)

    cautious = np.zeros((spec.n_states, spec.n_actions))
    cautious[:, 0] = 1.0
    bound = tabular.alpha_bound(spec, cautious, pi_beta.probs, nu, args.limit,
                                args.eps, visited=pi_beta.visited)
    alpha = args.alpha if args.alpha >= 0 else None
    result = tabular.tabular_cpq(spec, dataset, eps=args.eps, alpha=alpha,
                                 limit=args.limit)
    rep = result.report
    rows = [
        {"metric": "alpha_minimal", "value": bound.alpha_minimal},
        {"metric": "alpha_theorem", "value": bound.alpha_theorem},
        {"metric": "theorem_alpha_covers_minimal", "value": bound.theorem_covers},
        {"metric": "ood_set_empty", "value": bound.empty_set},
        {"metric": "alpha_used", "value": result.alpha},
        {"metric": "cost_slack", "value": rep.cost_slack},
        {"metric": "cost_within_limit", "value": rep.part1_ok},
        {"metric": "value_gap", "value": rep.value_gap},
        {"metric": "error_bound", "value": rep.bound},
        {"metric": "value_gap_within_bound", "value": rep.part2_ok},
        {"metric": "delta_hat", "value": rep.delta_hat},
        {"metric": "g_eps", "value": rep.g_eps},
        {"metric": "G_eps", "value": rep.big_g},
    ]
    out = Path(args.out) if args.out else None
    if out:
        _write_csv(out, rows, ["metric", "value"])
    print("metric,value")
    for row in rows:
        print(f"{row['metric']},{_fmt(row['value'])}")
    print()
    print(f"fixed-point penalty: alpha_minimal = {bound.alpha_minimal:.6g} "
          f"(the literal sufficiency expression gives {bound.alpha_theorem:.6g}; "
          f"{'covers' if bound.theorem_covers else 'does NOT cover'} the minimal value)")
    print(f"learned policy: worst dataset-state cost slack {rep.cost_slack:.3g} "
          f"(limit {args.limit:g}) -> {'OK' if rep.part1_ok else 'VIOLATED'}")
    print(f"value gap {rep.value_gap:.6g} vs bound {rep.bound:.6g} "
          f"-> {'OK' if rep.part2_ok else 'VIOLATED'} "
          f"(loose by {rep.bound / rep.value_gap if rep.value_gap > 0 else float('inf'):.3g}x)")
    ok = rep.part1_ok and rep.part2_ok
    return 0 if ok else 1


def _fmt(v):
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    out = run_experiment(config)
    print(f"run complete; outputs in {out}")
    return 0


def _cmd_sweep(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    limits = [float(tok) for tok in args.limits.split(",")]
    out = sweep_limits(config, limits)
    print(f"sweep complete; outputs in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpqlab",
        description="Safe offline RL lab: data generation, behavior modeling, "
                    "constrained policy training and exact verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a mixed offline dataset")
    p.add_argument("--env", required=True, choices=["chain6", "pointmass"])
    p.add_argument("--size", type=int, default=200000)
    p.add_argument("--mix-ratio", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train-vae", help="fit the behavior model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=_cmd_train_vae)

    p = sub.add_parser("train-cpq", help="train the constrained learner")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_train_cpq)

    p = sub.add_parser("train-bc-safe", help="behavior-clone the safe data")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_train_bc_safe)

    p = sub.add_parser("train-naive", help="train the naive dual baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_train_naive)

    p = sub.add_parser("verify-theorems",
                       help="exact fixed-point and error-bound checks")
    p.add_argument("--spec", default="chain6", choices=["chain6"])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=-1.0,
                   help="penalty weight; negative selects the automatic value")
    p.add_argument("--limit", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset-size", type=int, default=100000)
    p.add_argument("--out", default=None, help="optional CSV path")
    p.set_defaults(fn=_cmd_verify_theorems)

    p = sub.add_parser("run", help="run a config-driven experiment")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("sweep", help="re-run an experiment across cost limits")
    p.add_argument("--config", required=True)
    p.add_argument("--limits", required=True, help="comma-separated limits")
    p.set_defaults(fn=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface a clean one-line error, fail the run
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
