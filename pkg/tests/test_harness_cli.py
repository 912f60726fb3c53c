import csv
import re
from pathlib import Path

import numpy as np
import pytest

from cpqlab import ExperimentConfig, evaluate_policy, make_env, scripted_policy
from cpqlab.cli import main as cli_main
from cpqlab.config import parse_kv_text
from cpqlab.data import load_dataset
from cpqlab.harness import (
    estimator_policy,
    matrix_policy,
    resolve_out_dir,
    run_experiment,
    sweep_limits,
)
from cpqlab.svg import learning_curve_svg
from cpqlab.tabular import exact_policy_eval, policy_return, state_values

from conftest import rng_of


BASE_CONFIG = """
env = chain6
algorithm = tabular-cpq
dataset_size = 20000
dataset_seed = 7
limit = 1.5
gamma = 0.9
seeds = 0,1
eval_episodes = 10
eps = 0.1
"""


def config_with(tmp_path, **overrides) -> ExperimentConfig:
    mapping = parse_kv_text(BASE_CONFIG)
    mapping["out_dir"] = str(tmp_path / "run")
    mapping.update({k: str(v) for k, v in overrides.items()})
    return ExperimentConfig.from_mapping(mapping)


# --- config files ------------------------------------------------------------

def test_parse_kv_text_comments_and_blanks():
    mapping = parse_kv_text("a = 1\n# comment\n\nb = two # trailing\n")
    assert mapping == {"a": "1", "b": "two"}


def test_parse_kv_rejects_garbage():
    with pytest.raises(ValueError, match="line 1"):
        parse_kv_text("not a key value line")


def test_parse_kv_rejects_duplicates():
    with pytest.raises(ValueError, match="duplicate"):
        parse_kv_text("a = 1\na = 2")


def test_config_unknown_key():
    with pytest.raises(ValueError, match="unknown config key"):
        ExperimentConfig.from_mapping({"learning_rate_typo": "1"})


def test_config_round_trip(tmp_path):
    config = config_with(tmp_path, seeds="3,4,5", actor_hidden="32,32")
    text = config.to_text()
    again = ExperimentConfig.from_mapping(parse_kv_text(text))
    assert again == config


def test_config_validates_algorithm():
    with pytest.raises(ValueError, match="algorithm"):
        ExperimentConfig.from_mapping({"algorithm": "dqn"})


# --- evaluation protocol --------------------------------------------------------

def test_zero_cost_policy_never_violates(pointmass_env):
    policy = lambda state, rng: np.zeros(2)
    report = evaluate_policy(pointmass_env, policy, episodes=3, gamma=0.99,
                             rng=rng_of(0), limit=1.0)
    assert report.cost_mean == 0.0
    assert not report.violation


def test_single_episode_has_zero_std(chain_env):
    report = evaluate_policy(chain_env, lambda s, g: chain_env.CAUTIOUS,
                             episodes=1, gamma=0.9, rng=rng_of(0), limit=1.5)
    assert report.return_std == 0.0 and report.cost_std == 0.0


def test_violation_flag_matches_mean(chain_env):
    report = evaluate_policy(chain_env, lambda s, g: chain_env.RISKY,
                             episodes=20, gamma=0.9, rng=rng_of(0), limit=1.5)
    assert report.violation == (report.cost_mean > 1.5)
    assert report.violation


def test_matrix_policy_monte_carlo_matches_linear_solve(chain_env):
    spec = chain_env.tabular_spec()
    matrix = np.tile([0.7, 0.3], (6, 1))
    q = exact_policy_eval(spec, matrix, "cost").q
    exact = float(spec.initial @ state_values(matrix, q))
    costs = [evaluate_policy(chain_env, matrix_policy(matrix), episodes=200,
                             gamma=0.9, rng=rng_of(s), limit=1.5,
                             horizon=200).cost_mean for s in range(50)]
    stderr = np.std(costs) / np.sqrt(len(costs))
    assert abs(np.mean(costs) - exact) <= 3 * stderr + 1e-3


# --- experiment runner ------------------------------------------------------------

def test_tabular_experiment_outputs(tmp_path):
    config = config_with(tmp_path)
    out = run_experiment(config)
    assert (out / "config.txt").exists()
    for seed in (0, 1):
        seed_dir = out / f"seed_{seed}"
        assert (seed_dir / "metrics.csv").exists()
        assert (seed_dir / "train_metrics.csv").exists()
        assert (seed_dir / "checkpoint.jsonl").exists()
    with (out / "summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert rows and rows[-1]["violation"] == "False"
    assert all(np.isfinite(float(r["return_mean"])) for r in rows)


def test_experiment_rerun_is_byte_identical(tmp_path):
    out_a = run_experiment(config_with(tmp_path, out_dir=str(tmp_path / "a")))
    out_b = run_experiment(config_with(tmp_path, out_dir=str(tmp_path / "b")))
    for rel in ("summary.csv", "seed_0/metrics.csv", "seed_1/metrics.csv",
                "curves.svg", "config.txt"):
        a = (out_a / rel).read_bytes()
        b_text = (out_b / rel).read_bytes()
        if rel == "config.txt":
            a = a.replace(str(out_a).encode(), b"X")
            b_text = b_text.replace(str(out_b).encode(), b"X")
        assert a == b_text, f"{rel} differs between identical runs"


def test_svg_contract(tmp_path):
    path = tmp_path / "curve.svg"
    learning_curve_svg(path, [0, 1000, 2000], [0.1, 0.5, 0.7], [3.0, 2.0, 1.0],
                       limit=1.5, title="test")
    text = path.read_text()
    assert text.count("<polyline") == 2
    assert text.count("stroke-dasharray") == 1
    assert "limit = 1.5" in text


def test_svg_rejects_empty():
    with pytest.raises(ValueError):
        learning_curve_svg("/tmp/never.svg", [], [], [], 1.0)


def test_output_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("CPQLAB_OUTPUT_ROOT", str(tmp_path / "root"))
    config = ExperimentConfig.from_mapping({"out_dir": "nested/run"})
    assert resolve_out_dir(config) == tmp_path / "root" / "nested" / "run"
    monkeypatch.delenv("CPQLAB_OUTPUT_ROOT")
    assert resolve_out_dir(config) == Path("nested/run")


def test_sweep_rows_sorted_and_single_limit_matches_run(tmp_path):
    config = config_with(tmp_path, out_dir=str(tmp_path / "sweep"))
    out = sweep_limits(config, [1.5, 0.7])
    with (out / "sweep.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    limits = [float(r["limit"]) for r in rows]
    assert limits == sorted(limits)
    single = run_experiment(config_with(tmp_path, out_dir=str(tmp_path / "single"),
                                        limit=1.5))
    with (single / "summary.csv").open() as fh:
        expected = list(csv.DictReader(fh))[-1]
    matching = [r for r in rows if float(r["limit"]) == 1.5][0]
    assert float(matching["cost_mean"]) == float(expected["cost_mean"])


# --- command line ------------------------------------------------------------------

def test_cli_gen_data_round_trip(tmp_path, capsys):
    out = tmp_path / "chain.jsonl"
    code = cli_main(["gen-data", "--env", "chain6", "--size", "2000",
                     "--mix-ratio", "0.5", "--seed", "1", "--out", str(out)])
    assert code == 0
    ds = load_dataset(out)
    assert len(ds) >= 2000
    assert "safe" in capsys.readouterr().out


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    code = cli_main(["train-vae", "--data", str(tmp_path / "missing.jsonl"),
                     "--out", str(tmp_path / "vae.jsonl")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_cli_verify_theorems_reports(tmp_path, capsys):
    code = cli_main(["verify-theorems", "--spec", "chain6", "--eps", "0.1",
                     "--limit", "1.5", "--seed", "0",
                     "--dataset-size", "20000",
                     "--out", str(tmp_path / "report.csv")])
    out = capsys.readouterr().out
    assert code == 0
    assert "metric,value" in out
    assert "alpha_minimal," in out
    assert re.search(r"value_gap_within_bound,True", out)
    with (tmp_path / "report.csv").open() as fh:
        rows = {r["metric"]: r["value"] for r in csv.DictReader(fh)}
    assert rows["cost_within_limit"] == "True"


def test_cli_run_and_rerun_byte_identical(tmp_path):
    config_path = tmp_path / "experiment.cfg"
    mapping = parse_kv_text(BASE_CONFIG)
    mapping["seeds"] = "0"
    mapping["out_dir"] = str(tmp_path / "first")
    config_path.write_text("\n".join(f"{k} = {v}" for k, v in mapping.items()))
    assert cli_main(["run", "--config", str(config_path)]) == 0
    first = (tmp_path / "first" / "seed_0" / "metrics.csv").read_bytes()

    mapping["out_dir"] = str(tmp_path / "second")
    config_path.write_text("\n".join(f"{k} = {v}" for k, v in mapping.items()))
    assert cli_main(["run", "--config", str(config_path)]) == 0
    second = (tmp_path / "second" / "seed_0" / "metrics.csv").read_bytes()
    assert first == second
