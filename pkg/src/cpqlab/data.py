"""Offline datasets: scripted behavior policies, mixture generation,
empirical behavior statistics and a portable on-disk format.

A dataset is an ordered list of transitions, each tagged with the policy
that produced it ("safe" or "unsafe") and its episode id, plus metadata
describing how it was generated.  Mixtures interleave whole episodes from
the two scripted controllers until each source meets its sample budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import serial
from .envs import ChainEnv, PointMassEnv, UnsupportedEnvError, make_env

SOURCES = ("safe", "unsafe")


@dataclass(frozen=True)
class TransitionSample:
    """One offline record: (s, a, s', r, c, done) plus provenance."""

    state: object
    action: object
    next_state: object
    reward: float
    cost: float
    terminal: bool
    source: str
    episode: int


@dataclass
class OfflineDataset:
    samples: list[TransitionSample]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def source_counts(self) -> dict[str, int]:
        counts = {src: 0 for src in SOURCES}
        for s in self.samples:
            counts[s.source] = counts.get(s.source, 0) + 1
        return counts

    def filter_source(self, source: str) -> "OfflineDataset":
        if source not in SOURCES:
            raise ValueError(f"unknown source tag {source!r}")
        kept = [s for s in self.samples if s.source == source]
        meta = dict(self.meta)
        meta["filtered_source"] = source
        return OfflineDataset(kept, meta)

    def env(self):
        return make_env(self.meta["env"])

    def to_arrays(self, env=None) -> dict[str, np.ndarray]:
        """Dense training views: observations and embedded actions as float64."""
        env = env or self.env()
        obs = np.stack([env.observe(s.state) for s in self.samples])
        next_obs = np.stack([env.observe(s.next_state) for s in self.samples])
        act = np.stack([env.embed_action(s.action) for s in self.samples])
        return {
            "obs": obs,
            "act": act,
            "next_obs": next_obs,
            "reward": np.array([s.reward for s in self.samples]),
            "cost": np.array([s.cost for s in self.samples]),
            "done": np.array([1.0 if s.terminal else 0.0 for s in self.samples]),
            "safe": np.array([s.source == "safe" for s in self.samples]),
        }


@dataclass
class TabularBehaviorPolicy:
    """Empirical count-ratio policy of a tabular dataset.

    `probs[s]` is only meaningful where `visited[s]`; unvisited states keep a
    zero row and are flagged instead of being given a made-up distribution.
    """

    probs: np.ndarray       # (S, A)
    counts: np.ndarray      # (S, A) integer visit counts
    visited: np.ndarray     # (S,) bool

    @property
    def state_visits(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def scripted_policy(env, kind: str):
    """The safe or unsafe scripted controller for `env` as policy(state, rng)."""
    if kind not in SOURCES:
        raise ValueError(f"policy kind must be one of {SOURCES}, got {kind!r}")
    if isinstance(env, ChainEnv):
        action = env.CAUTIOUS if kind == "safe" else env.RISKY
        return lambda state, rng: action
    if isinstance(env, PointMassEnv):
        gain_p, gain_v, box = (0.3, 0.4, 0.3) if kind == "safe" else (1.5, 0.6, 1.0)

        def controller(state, rng):
            p = np.asarray(state.position)
            v = np.asarray(state.velocity)
            return np.clip(gain_p * (env.goal - p) - gain_v * v, -box, box)

        return controller
    raise UnsupportedEnvError(f"no scripted policies for {type(env).__name__}")


def _rollout_episode(env, policy, episode_id: int, source: str,
                     rng: np.random.Generator) -> list[TransitionSample]:
    samples = []
    state = env.reset(rng)
    for _ in range(env.horizon):
        action = policy(state, rng)
        out = env.step(state, action, rng)
        samples.append(TransitionSample(
            state=state, action=action, next_state=out.next_state,
            reward=out.reward, cost=out.cost, terminal=out.terminal,
            source=source, episode=episode_id))
        if out.terminal:
            break
        state = out.next_state
    return samples


def generate_dataset(env, mix_ratio: float, n_transitions: int,
                     seed: int, env_id: str | None = None) -> OfflineDataset:
    """Roll whole episodes from the scripted controllers, alternating sources.

    `mix_ratio` is the fraction of the sample budget assigned to the safe
    controller.  Episodes are never truncated to hit a budget exactly, so per
    source the final count overshoots by at most one episode length.
    """
    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueError("mix_ratio must lie in [0, 1]")
    if n_transitions < 1:
        raise ValueError("n_transitions must be at least 1")
    rng = np.random.default_rng(np.random.PCG64(seed))
    budgets = {"safe": round(mix_ratio * n_transitions)}
    budgets["unsafe"] = n_transitions - budgets["safe"]
    policies = {src: scripted_policy(env, src) for src in SOURCES if budgets[src] > 0}
    counts = {src: 0 for src in SOURCES}
    samples: list[TransitionSample] = []
    episode_id = 0
    while any(counts[src] < budgets[src] for src in SOURCES):
        for src in SOURCES:
            if counts[src] >= budgets[src]:
                continue
            episode = _rollout_episode(env, policies[src], episode_id, src, rng)
            samples.extend(episode)
            counts[src] += len(episode)
            episode_id += 1
    if env_id is None:
        env_id = "chain6" if isinstance(env, ChainEnv) else "pointmass"
    meta = {
        "env": env_id,
        "gamma": env.gamma,
        "limit": env.limit,
        "mix_ratio": mix_ratio,
        "requested_transitions": n_transitions,
        "n_safe": counts["safe"],
        "n_unsafe": counts["unsafe"],
        "n_episodes": episode_id,
        "seed": seed,
        # declared shift that maps recorded rewards into [0, bound]
        "reward_shift": getattr(env, "reward_shift", 0.0),
    }
    return OfflineDataset(samples, meta)


def empirical_behavior_policy(dataset: OfflineDataset) -> TabularBehaviorPolicy:
    """Count-ratio action frequencies per state for a tabular dataset."""
    env = dataset.env()
    if not isinstance(env, ChainEnv):
        raise UnsupportedEnvError(
            "empirical_behavior_policy needs a tabular dataset")
    counts = np.zeros((env.n_states, env.n_actions), dtype=np.int64)
    for s in dataset.samples:
        counts[s.state, s.action] += 1
    visits = counts.sum(axis=1)
    visited = visits > 0
    probs = np.zeros_like(counts, dtype=np.float64)
    probs[visited] = counts[visited] / visits[visited, None]
    return TabularBehaviorPolicy(probs=probs, counts=counts, visited=visited)


def batch_sample(dataset: OfflineDataset, batch_size: int,
                 rng: np.random.Generator) -> list[TransitionSample]:
    """Uniform sample with replacement."""
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    if batch_size > len(dataset):
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
    idx = rng.integers(0, len(dataset), size=batch_size)
    return [dataset.samples[i] for i in idx]


def _state_to_json(state):
    if isinstance(state, (int, np.integer)):
        return int(state)
    from .envs import ContinuousEnvState

    if isinstance(state, ContinuousEnvState):
        return {"p": list(map(float, state.position)),
                "v": list(map(float, state.velocity)), "t": state.t}
    raise TypeError(f"unsupported state type {type(state).__name__}")


def _state_from_json(obj):
    if isinstance(obj, int):
        return obj
    from .envs import ContinuousEnvState

    return ContinuousEnvState(position=tuple(obj["p"]), velocity=tuple(obj["v"]),
                              t=obj["t"])


def _action_to_json(action):
    if isinstance(action, (int, np.integer)):
        return int(action)
    return [float(a) for a in np.asarray(action).reshape(-1)]


def _action_from_json(obj):
    if isinstance(obj, int):
        return obj
    return np.asarray(obj, dtype=np.float64)


def save_dataset(dataset: OfflineDataset, path) -> None:
    records = [{
        "s": _state_to_json(t.state),
        "a": _action_to_json(t.action),
        "sp": _state_to_json(t.next_state),
        "r": t.reward,
        "c": t.cost,
        "d": t.terminal,
        "src": t.source,
        "ep": t.episode,
    } for t in dataset.samples]
    serial.dump_records(path, kind="offline-dataset", meta=dataset.meta,
                        records=records)


def load_dataset(path) -> OfflineDataset:
    meta, records = serial.load_records(path, expect_kind="offline-dataset")
    samples = []
    for i, rec in enumerate(records):
        try:
            samples.append(TransitionSample(
                state=_state_from_json(rec["s"]),
                action=_action_from_json(rec["a"]),
                next_state=_state_from_json(rec["sp"]),
                reward=float(rec["r"]),
                cost=float(rec["c"]),
                terminal=bool(rec["d"]),
                source=rec["src"],
                episode=int(rec["ep"]),
            ))
        except (KeyError, TypeError) as exc:
            raise serial.RecordFormatError(
                f"{path}: record {i} is missing fields: {exc}") from exc
    return OfflineDataset(samples, meta)
