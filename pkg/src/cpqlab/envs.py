"""Constrained-MDP environments.

Two desk-scale tasks with a reward/cost trade-off:

* ``chain6`` - a six-state chain where a cheap cautious action makes progress
  with probability 0.7 and an expensive risky action always advances.  The
  exact model is available as a :class:`CmdpTabularSpec` for closed-form work.
* ``pointmass`` - a 2-d double integrator steered toward a goal; the per-step
  cost is the total actuation magnitude |a1| + |a2|, so staying cheap means
  applying little force.

Environments are plain values: `step` never mutates its inputs, and all
randomness comes from the generator handed in by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_array


@dataclass(frozen=True)
class CmdpTabularSpec:
    """Explicit finite CMDP: transition kernel, reward/cost tables, discount,
    initial distribution and the cost limit."""

    transitions: np.ndarray   # (S, A, S) row-stochastic in the last axis
    rewards: np.ndarray       # (S, A) in [0, reward_bound]
    costs: np.ndarray         # (S, A) in [0, cost_bound]
    gamma: float
    initial: np.ndarray       # (S,) distribution
    limit: float
    reward_bound: float
    cost_bound: float

    def __post_init__(self):
        p = np.asarray(self.transitions, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition kernel must be (S, A, S), got {p.shape}")
        if not np.allclose(p.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("every transition row must sum to 1 within 1e-12")
        if np.any(p < 0):
            raise ValueError("transition probabilities must be nonnegative")
        r, c = np.asarray(self.rewards), np.asarray(self.costs)
        if np.any(r < 0) or np.any(r > self.reward_bound + 1e-12):
            raise ValueError("rewards must lie in [0, reward_bound]")
        if np.any(c < 0) or np.any(c > self.cost_bound + 1e-12):
            raise ValueError("costs must lie in [0, cost_bound]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        eta = np.asarray(self.initial, dtype=np.float64)
        if eta.shape != (p.shape[0],) or not np.isclose(eta.sum(), 1.0):
            raise ValueError("initial distribution must sum to 1 over the states")
        if self.limit < 0:
            raise ValueError("cost limit must be nonnegative")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


@dataclass(frozen=True)
class StepOutcome:
    next_state: object
    reward: float
    cost: float
    terminal: bool


@dataclass(frozen=True)
class ContinuousEnvState:
    position: tuple[float, float]
    velocity: tuple[float, float]
    t: int = 0


class UnsupportedEnvError(TypeError):
    """Operation requires a tabular environment."""


class ChainEnv:
    """Six-state chain; action 0 is cautious, action 1 is risky.

    Entering the last state ends the episode with reward 1; every other step
    pays a small living reward.  In the exact spec the goal state is encoded
    as absorbing with zero reward and cost, which is equivalent to the
    terminal flag the simulator emits.
    """

    CAUTIOUS, RISKY = 0, 1

    def __init__(self, n_states: int = 6, p_advance_cautious: float = 0.7,
                 cost_cautious: float = 0.1, cost_risky: float = 1.0,
                 goal_reward: float = 1.0, living_reward: float = 0.05,
                 gamma: float = 0.9, limit: float = 1.5, horizon: int = 50):
        if n_states < 2:
            raise ValueError("chain needs at least 2 states")
        self.n_states = n_states
        self.n_actions = 2
        self.p_advance_cautious = p_advance_cautious
        self.cost_cautious = cost_cautious
        self.cost_risky = cost_risky
        self.goal_reward = goal_reward
        self.living_reward = living_reward
        self.gamma = gamma
        self.limit = limit
        self.horizon = horizon
        self.obs_dim = n_states
        self.action_dim = 1  # continuous embedding width for neural agents
        self._spec = self._build_spec()
        # per-(s, a) cumulative successor distributions for fast sampling
        self._cum_p = np.cumsum(self._spec.transitions, axis=2)
        self._cum_eta = np.cumsum(self._spec.initial)

    @property
    def goal_state(self) -> int:
        return self.n_states - 1

    def reset(self, rng: np.random.Generator) -> int:
        idx = int(np.searchsorted(self._cum_eta, rng.random(), side="right"))
        return min(idx, self.n_states - 1)

    def step(self, state: int, action: int, rng: np.random.Generator) -> StepOutcome:
        if not isinstance(state, (int, np.integer)) or not 0 <= state < self.n_states:
            raise ValueError(f"invalid chain state {state!r}")
        if action not in (self.CAUTIOUS, self.RISKY):
            raise ValueError(f"invalid chain action {action!r}")
        spec = self._spec
        nxt = min(int(np.searchsorted(self._cum_p[state, action], rng.random(),
                                      side="right")), self.n_states - 1)
        reward = float(spec.rewards[state, action])
        cost = float(spec.costs[state, action])
        return StepOutcome(nxt, reward, cost, terminal=(nxt == self.goal_state))

    def tabular_spec(self) -> CmdpTabularSpec:
        return self._spec

    def _build_spec(self) -> CmdpTabularSpec:
        s_n, goal = self.n_states, self.goal_state
        p = np.zeros((s_n, 2, s_n))
        r = np.full((s_n, 2), self.living_reward)
        c = np.zeros((s_n, 2))
        for s in range(goal):
            adv = self.p_advance_cautious
            p[s, self.CAUTIOUS, min(s + 1, goal)] += adv
            p[s, self.CAUTIOUS, s] += 1.0 - adv
            p[s, self.RISKY, min(s + 1, goal)] = 1.0
            c[s, self.CAUTIOUS] = self.cost_cautious
            c[s, self.RISKY] = self.cost_risky
            for a in (self.CAUTIOUS, self.RISKY):
                p_goal = p[s, a, goal]
                r[s, a] = p_goal * self.goal_reward + (1.0 - p_goal) * self.living_reward
        # goal state: absorbing, no reward, no cost (terminal encoding)
        p[goal, :, goal] = 1.0
        r[goal, :] = 0.0
        eta = np.zeros(s_n)
        eta[0] = 1.0
        return CmdpTabularSpec(
            transitions=p, rewards=r, costs=c, gamma=self.gamma, initial=eta,
            limit=self.limit, reward_bound=self.goal_reward,
            cost_bound=max(self.cost_cautious, self.cost_risky))

    # --- interface for neural agents -------------------------------------
    def observe(self, state: int) -> np.ndarray:
        vec = np.zeros(self.n_states)
        vec[state] = 1.0
        return vec

    def embed_action(self, action: int) -> np.ndarray:
        """Discrete action as a point in the continuous box (-1, 1)."""
        return np.array([0.7 if action == self.RISKY else -0.7])

    def decode_action(self, action_vec: np.ndarray) -> int:
        return self.RISKY if float(np.asarray(action_vec).reshape(-1)[0]) > 0.0 else self.CAUTIOUS


class PointMassEnv:
    """2-d point mass pushed toward a goal; cost is actuation magnitude.

    Dynamics per step: v' = 0.99 v + 0.1 a, p' = p + 0.1 v'.  Reward is
    -0.1 * distance(p', goal) plus a bonus of 1.0 inside the goal radius;
    cost is |a1| + |a2|.  Episodes end at the goal or at the horizon.
    """

    def __init__(self, goal: tuple[float, float] = (1.0, 1.0), horizon: int = 100,
                 goal_radius: float = 0.1, drag: float = 0.99, accel: float = 0.1,
                 dt: float = 0.1, distance_penalty: float = 0.1,
                 goal_bonus: float = 1.0, limit: float = 10.0, gamma: float = 0.995):
        self.goal = np.asarray(goal, dtype=np.float64)
        self.horizon = horizon
        self.goal_radius = goal_radius
        self.drag = drag
        self.accel = accel
        self.dt = dt
        self.distance_penalty = distance_penalty
        self.goal_bonus = goal_bonus
        self.limit = limit
        self.gamma = gamma
        self.obs_dim = 4
        self.action_dim = 2
        self.cost_bound = 2.0

    def reset(self, rng: np.random.Generator) -> ContinuousEnvState:
        return ContinuousEnvState(position=(0.0, 0.0), velocity=(0.0, 0.0), t=0)

    def step(self, state: ContinuousEnvState, action,
             rng: np.random.Generator) -> StepOutcome:
        a = check_array(action, "action", ndim=1, last_dim=2)
        if np.any(np.abs(a) > 1.0 + 1e-12):
            raise ValueError(f"action components must lie in [-1, 1], got {a}")
        p = np.asarray(state.position)
        v = np.asarray(state.velocity)
        v_next = self.drag * v + self.accel * a
        p_next = p + self.dt * v_next
        dist = float(np.linalg.norm(p_next - self.goal))
        at_goal = dist < self.goal_radius
        reward = -self.distance_penalty * dist + (self.goal_bonus if at_goal else 0.0)
        cost = float(np.abs(a).sum())
        t_next = state.t + 1
        nxt = ContinuousEnvState(position=tuple(p_next), velocity=tuple(v_next), t=t_next)
        return StepOutcome(nxt, reward, cost, terminal=at_goal or t_next >= self.horizon)

    def observe(self, state: ContinuousEnvState) -> np.ndarray:
        return np.array([*state.position, *state.velocity], dtype=np.float64)

    def embed_action(self, action) -> np.ndarray:
        return np.asarray(action, dtype=np.float64)

    def decode_action(self, action_vec: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(action_vec, dtype=np.float64).reshape(-1), -1.0, 1.0)

    @property
    def reward_shift(self) -> float:
        """Constant that maps rewards into [0, bound]; stored in dataset metadata."""
        # worst case over the reachable arena: distance stays within ~4 units
        return 0.1 * 4.0


def tabular_spec(env) -> CmdpTabularSpec:
    """Exact model of a tabular environment; continuous envs are unsupported."""
    if isinstance(env, ChainEnv):
        return env.tabular_spec()
    raise UnsupportedEnvError(f"{type(env).__name__} has no exact tabular model")


def discounted_rollout(env, policy, gamma: float, horizon: int,
                       rng: np.random.Generator) -> tuple[float, float]:
    """Single-trajectory discounted return and cost under `policy`.

    `policy` is called as policy(state, rng) and must return a valid action.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    state = env.reset(rng)
    ret = cost = 0.0
    discount = 1.0
    for _ in range(horizon):
        action = policy(state, rng)
        out = env.step(state, action, rng)
        ret += discount * out.reward
        cost += discount * out.cost
        discount *= gamma
        if out.terminal:
            break
        state = out.next_state
    return ret, cost


_ENV_BUILDERS = {"chain6": ChainEnv, "pointmass": PointMassEnv}


def make_env(name: str, **overrides):
    """Build an environment by id ('chain6' or 'pointmass') with overrides."""
    try:
        builder = _ENV_BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown environment id {name!r}; "
                         f"known: {sorted(_ENV_BUILDERS)}") from None
    return builder(**overrides)
