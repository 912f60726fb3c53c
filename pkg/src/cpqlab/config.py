"""Flat ``key = value`` experiment configuration.

Every numeric constant of an experiment is overridable through these keys;
unknown keys are rejected so typos fail loudly.  `to_text` produces a
canonical echo of the configuration (sorted keys, repr floats) that runs
write next to their outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

ALGORITHMS = ("cpq", "bc-safe", "naive", "tabular-cpq")


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment, blanks are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in str(s).replace(",", " ").split())


def _parse_float_list(s: str) -> list[float]:
    return [float(tok) for tok in str(s).replace(",", " ").split()]


@dataclass
class ExperimentConfig:
    """One experiment: environment, data source, algorithm and its knobs."""

    env: str = "pointmass"
    algorithm: str = "cpq"
    dataset_path: str = ""            # empty: generate from the keys below
    dataset_size: int = 200000
    mix_ratio: float = 0.5
    dataset_seed: int = 0
    limit: float = 10.0
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs/experiment"

    # training / evaluation protocol
    steps: int = 50000
    eval_interval: int = 5000
    eval_episodes: int = 10
    eval_stochastic: bool = False
    gamma: float = 0.995

    # shared network/optimizer knobs
    batch_size: int = 256
    critic_lr: float = 1e-3
    actor_lr: float = 1e-5
    tau: float = 0.005
    actor_hidden: tuple[int, ...] = (300, 300)
    critic_hidden: tuple[int, ...] = (400, 400)

    # constraints-penalized learner
    alpha_lr: float = 1e-3
    n_ood_samples: int = 10
    target_action_samples: int = 1
    limit_cost_factor: float = 1.5

    # behavior model
    vae_steps: int = 20000
    vae_hidden: int = 128
    vae_latent: int = 0               # 0: twice the action dimension
    vae_beta: float = 1.5
    vae_lr: float = 1e-3
    percentile: float = 75.0
    vae_shared: bool = True           # one behavior model reused across seeds

    # behavior cloning
    bc_steps: int = 5000
    bc_lr: float = 1e-3

    # naive dual baseline
    naive_steps: int = 20000
    lambda_lr: float = 1e-3
    xi: float = 0.05

    # exact tabular learner
    eps: float = 0.1
    alpha: float = -1.0               # negative: auto from the minimal bound

    _PARSERS = {
        "seeds": _parse_int_tuple,
        "actor_hidden": _parse_int_tuple,
        "critic_hidden": _parse_int_tuple,
    }

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, "
                             f"got {self.algorithm!r}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be at least 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}; known keys: "
                                 f"{sorted(known)}")
            if key in cls._PARSERS:
                kwargs[key] = cls._PARSERS[key](raw)
                continue
            typ = known[key].type
            if typ in ("int", int):
                kwargs[key] = int(raw)
            elif typ in ("float", float):
                kwargs[key] = float(raw)
            elif typ in ("bool", bool):
                kwargs[key] = str(raw).lower() in ("1", "true", "yes", "on")
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_mapping(parse_kv_text(Path(path).read_text(encoding="utf-8")))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"
