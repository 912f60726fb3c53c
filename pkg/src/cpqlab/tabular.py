"""Exact finite-CMDP machinery.

Everything here works on explicit (S, A) tables and linear solves, so it can
serve as an oracle for the sampled, gradient-based code: closed-form policy
evaluation, the penalized cost fixed point and its minimal sufficient
penalty weight, out-of-distribution action sets by the ratio test, a
brute-force optimal-safe-policy search, and a fully tabular variant of the
constraints-penalized learner together with its error-bound diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import OfflineDataset, TabularBehaviorPolicy, empirical_behavior_policy
from .envs import CmdpTabularSpec
from .validation import check_probability_rows


class SupportViolationError(ValueError):
    """nu places weight where the behavior policy has no support."""


class EnumerationCapError(ValueError):
    """The deterministic policy space is too large to enumerate."""


@dataclass(frozen=True)
class ExactQ:
    """State-action values solving Q = r_signal + gamma * P^pi Q exactly."""

    q: np.ndarray          # (S, A)
    signal: str            # "reward" or "cost"
    policy: np.ndarray     # (S, A) the pi it was computed for
    residual: float        # sup-norm Bellman residual of the solution


@dataclass(frozen=True)
class PenalizedFixedPoint:
    q: np.ndarray                  # (S, A) closed-form fixed point
    iterates: list[np.ndarray]     # recursion trail (empty unless requested)
    ratio: np.ndarray              # (S, A) nu / pi_beta, zero off supp(nu)


@dataclass(frozen=True)
class OodActionSet:
    pairs: list[tuple[int, int]]
    eps: float
    nu: np.ndarray
    pi_beta: np.ndarray

    def mask(self, n_states: int, n_actions: int) -> np.ndarray:
        m = np.zeros((n_states, n_actions), dtype=bool)
        for s, a in self.pairs:
            m[s, a] = True
        return m


@dataclass(frozen=True)
class AlphaBound:
    alpha_theorem: float    # the literal sufficient-penalty expression
    alpha_minimal: float    # exact smallest alpha pushing the OOD set to the limit
    theorem_covers: bool    # alpha_theorem >= alpha_minimal
    empty_set: bool


@dataclass(frozen=True)
class OptimalSafePolicy:
    policy: np.ndarray       # (S, A), possibly a two-policy mixture
    value: float             # R(pi*) from the initial distribution
    cost: float              # C(pi*)
    feasible: bool           # some policy satisfies the limit
    mixture_weight: float    # 0 when the best deterministic policy was kept
    state_values: np.ndarray  # V_r*(s)


@dataclass
class TheoremTwoReport:
    """Diagnostics for the two-part performance bound of the tabular learner."""

    v_star: np.ndarray        # V_r*(s)
    v_hat_r: np.ndarray       # learned reward value per state
    v_hat_c: np.ndarray       # learned (penalized) cost value per state
    dataset_states: np.ndarray  # bool mask of states present in the dataset
    limit: float
    eps: float
    gamma: float
    delta_hat: float          # measured max squared Bellman residual
    g_eps: float              # min mu_beta over pi-visited states
    big_g: float              # sqrt((1-gamma)/gamma) + sqrt(eps/g_eps)
    bound: float              # 4*gamma/(1-gamma)^3 * big_g * sqrt(delta_hat)
    value_gap: float          # max |V* - V_hat_r| over dataset states
    cost_slack: float         # max (V_hat_c - limit) over dataset states
    part1_ok: bool
    part2_ok: bool
    fallback_states: list[int] = field(default_factory=list)


def _joint_kernel(spec: CmdpTabularSpec, policy: np.ndarray) -> np.ndarray:
    """State-action transition matrix M[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')."""
    s_n, a_n = spec.n_states, spec.n_actions
    m = spec.transitions[:, :, :, None] * policy[None, None, :, :]
    return m.reshape(s_n * a_n, s_n * a_n)


def exact_policy_eval(spec: CmdpTabularSpec, policy: np.ndarray,
                      signal: str = "reward") -> ExactQ:
    """Solve (I - gamma P^pi) Q = r (or c) directly."""
    policy = check_probability_rows(policy, "policy")
    table = {"reward": spec.rewards, "cost": spec.costs}[signal]
    m = _joint_kernel(spec, policy)
    n = m.shape[0]
    try:
        q_vec = np.linalg.solve(np.eye(n) - spec.gamma * m, table.reshape(-1))
    except np.linalg.LinAlgError as exc:  # cannot happen for gamma < 1
        raise ArithmeticError(f"singular Bellman system: {exc}") from exc
    residual = float(np.max(np.abs(q_vec - (table.reshape(-1) + spec.gamma * m @ q_vec))))
    return ExactQ(q=q_vec.reshape(spec.n_states, spec.n_actions), signal=signal,
                  policy=policy, residual=residual)


def state_values(policy: np.ndarray, q: np.ndarray) -> np.ndarray:
    return (policy * q).sum(axis=1)


def policy_return(spec: CmdpTabularSpec, policy: np.ndarray,
                  signal: str = "reward") -> float:
    """Scalar discounted return/cost of pi from the initial distribution."""
    q = exact_policy_eval(spec, policy, signal).q
    return float(spec.initial @ state_values(policy, q))


def _penalty_ratio(pi_beta: np.ndarray, nu: np.ndarray) -> np.ndarray:
    nu = np.asarray(nu, dtype=np.float64)
    pi_beta = np.asarray(pi_beta, dtype=np.float64)
    on = nu > 0.0
    if np.any(on & (pi_beta <= 0.0)):
        bad = np.argwhere(on & (pi_beta <= 0.0))[0]
        raise SupportViolationError(
            f"nu is positive at state {bad[0]}, action {bad[1]} where the "
            "behavior policy has no support")
    ratio = np.zeros_like(nu)
    ratio[on] = nu[on] / pi_beta[on]
    return ratio


def penalized_cost_fixed_point(spec: CmdpTabularSpec, policy: np.ndarray,
                               pi_beta: np.ndarray, nu: np.ndarray, alpha: float,
                               n_iterates: int = 0) -> PenalizedFixedPoint:
    """Cost values distorted by the overestimation penalty.

    Solves Q = c + gamma P^pi Q + (alpha/2) * nu/pi_beta in closed form.
    When `n_iterates` > 0 the recursion trail starting from Q = 0 is also
    returned so convergence and monotonicity can be inspected.
    """
    policy = check_probability_rows(policy, "policy")
    ratio = _penalty_ratio(pi_beta, nu)
    m = _joint_kernel(spec, policy)
    n = m.shape[0]
    rhs = spec.costs.reshape(-1) + 0.5 * alpha * ratio.reshape(-1)
    q_vec = np.linalg.solve(np.eye(n) - spec.gamma * m, rhs)
    iterates: list[np.ndarray] = []
    if n_iterates > 0:
        q_k = np.zeros(n)
        for _ in range(n_iterates):
            q_k = rhs + spec.gamma * (m @ q_k)
            iterates.append(q_k.reshape(spec.n_states, spec.n_actions).copy())
    return PenalizedFixedPoint(
        q=q_vec.reshape(spec.n_states, spec.n_actions),
        iterates=iterates, ratio=ratio)


def ood_action_set(pi_beta: np.ndarray, nu: np.ndarray, eps: float,
                   visited: np.ndarray | None = None) -> OodActionSet:
    """Pairs passing the ratio test pi_beta/nu <= eps; nu = 0 pairs excluded."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    pi_beta = np.asarray(pi_beta, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    pairs = []
    for s in range(pi_beta.shape[0]):
        if visited is not None and not visited[s]:
            continue
        for a in range(pi_beta.shape[1]):
            if nu[s, a] > 0.0 and pi_beta[s, a] <= eps * nu[s, a]:
                pairs.append((s, a))
    return OodActionSet(pairs=pairs, eps=eps, nu=nu, pi_beta=pi_beta)


def _probs_and_visited(pi_beta, visited):
    if isinstance(pi_beta, TabularBehaviorPolicy):
        return pi_beta.probs, pi_beta.visited
    probs = np.asarray(pi_beta, dtype=np.float64)
    if visited is None:
        visited = probs.sum(axis=1) > 0
    return probs, visited


def default_ood_weights(pi_beta: TabularBehaviorPolicy | np.ndarray, eps: float,
                        visited: np.ndarray | None = None) -> np.ndarray:
    """Self-consistent normalized OOD policy: per visited state, nu is uniform
    over the largest set K of least-likely supported actions whose members all
    pass the ratio test against that uniform, i.e. pi_beta(a|s) <= eps / |K|.

    On well-covered data (every action share far above eps) K is empty and nu
    is identically zero, so the learner applies no penalty.
    """
    probs, visited = _probs_and_visited(pi_beta, visited)
    nu = np.zeros_like(probs)
    for s in range(probs.shape[0]):
        if not visited[s]:
            continue
        present = np.flatnonzero(probs[s] > 0.0)
        order = present[np.argsort(probs[s][present], kind="stable")]
        for k in range(len(order), 0, -1):
            chosen = order[:k]
            if probs[s][chosen].max() <= eps / k:
                nu[s, chosen] = 1.0 / k
                break
    return nu


def forced_ood_weights(pi_beta: TabularBehaviorPolicy | np.ndarray, eps: float,
                       visited: np.ndarray | None = None) -> np.ndarray:
    """Explicit nonempty OOD construction for penalty-sufficiency studies.

    Flags each visited state's least-likely supported action and gives every
    flagged pair one shared weight, sized so the ratio test
    pi_beta <= eps * nu holds with equality at the most-likely flagged pair.
    nu here is an unnormalized weight table: the fixed point only consumes
    the ratio nu/pi_beta, and with two well-covered actions per state no
    normalized conditional could pass the ratio test at small eps.
    """
    probs, visited = _probs_and_visited(pi_beta, visited)
    nu = np.zeros_like(probs)
    flagged: list[tuple[int, int]] = []
    for s in range(probs.shape[0]):
        if not visited[s]:
            continue
        present = probs[s] > 0.0
        if not present.any():
            continue
        low = np.min(probs[s][present])
        for a in range(probs.shape[1]):
            if present[a] and probs[s, a] <= low:
                flagged.append((s, a))
    if not flagged:
        return nu
    weight = max(probs[s, a] for s, a in flagged) / eps
    for s, a in flagged:
        nu[s, a] = weight
    return nu


def alpha_bound(spec: CmdpTabularSpec, policy: np.ndarray, pi_beta: np.ndarray,
                nu: np.ndarray, limit: float, eps: float,
                visited: np.ndarray | None = None) -> AlphaBound:
    """Sufficient and exact-minimal penalty weights for the OOD set.

    alpha_minimal is the smallest alpha for which the penalized fixed point
    reaches the limit on every OOD pair, computed from the closed form.
    alpha_theorem evaluates the separate literal sufficiency expression
    2 * eps * max_{s,a} (limit - Qc(s,a)) * [(I - gamma P^pi) 1](s,a); whether
    it actually dominates alpha_minimal is reported, not assumed.
    """
    policy = check_probability_rows(policy, "policy")
    ood = ood_action_set(pi_beta, nu, eps, visited=visited)
    q_c = exact_policy_eval(spec, policy, "cost").q
    m = _joint_kernel(spec, policy)
    n = m.shape[0]
    row_shrink = ((np.eye(n) - spec.gamma * m) @ np.ones(n)).reshape(q_c.shape)
    alpha_theorem = float(max(0.0, 2.0 * eps * np.max((limit - q_c) * row_shrink)))
    if not ood.pairs:
        return AlphaBound(alpha_theorem=0.0, alpha_minimal=0.0,
                          theorem_covers=True, empty_set=True)
    ratio = _penalty_ratio(pi_beta, nu)
    lift = np.linalg.solve(np.eye(n) - spec.gamma * m, ratio.reshape(-1))
    lift = lift.reshape(q_c.shape)
    alpha_minimal = 0.0
    for s, a in ood.pairs:
        gap = limit - q_c[s, a]
        if gap > 0.0:
            alpha_minimal = max(alpha_minimal, 2.0 * gap / lift[s, a])
    return AlphaBound(alpha_theorem=alpha_theorem, alpha_minimal=alpha_minimal,
                      theorem_covers=alpha_theorem >= alpha_minimal - 1e-12,
                      empty_set=False)


def optimal_safe_policy(spec: CmdpTabularSpec, limit: float | None = None,
                        enumeration_cap: int = 10 ** 6) -> OptimalSafePolicy:
    """Brute-force CMDP oracle: enumerate deterministic policies, then probe
    two-policy mixtures along the constraint boundary.

    Mixtures of more than two deterministic policies are not searched; with a
    single cost constraint a two-policy mixture suffices at desk scale.
    """
    limit = spec.limit if limit is None else limit
    s_n, a_n = spec.n_states, spec.n_actions
    if a_n ** s_n > enumeration_cap:
        raise EnumerationCapError(
            f"{a_n}^{s_n} deterministic policies exceed the cap {enumeration_cap}")

    def as_matrix(assignment: np.ndarray) -> np.ndarray:
        mat = np.zeros((s_n, a_n))
        mat[np.arange(s_n), assignment] = 1.0
        return mat

    def evaluate(mat: np.ndarray) -> tuple[float, float, np.ndarray]:
        q_r = exact_policy_eval(spec, mat, "reward").q
        q_c = exact_policy_eval(spec, mat, "cost").q
        v_r = state_values(mat, q_r)
        return float(spec.initial @ v_r), float(
            spec.initial @ state_values(mat, q_c)), v_r

    best_feasible = best_any = None
    assignment = np.zeros(s_n, dtype=np.int64)
    for idx in range(a_n ** s_n):
        k = idx
        for s in range(s_n):
            assignment[s] = k % a_n
            k //= a_n
        mat = as_matrix(assignment)
        r_val, c_val, v_r = evaluate(mat)
        entry = (r_val, c_val, mat, v_r)
        if best_any is None or r_val > best_any[0]:
            best_any = entry
        if c_val <= limit + 1e-12 and (best_feasible is None or r_val > best_feasible[0]):
            best_feasible = entry

    if best_feasible is None:
        r_val, c_val, mat, v_r = best_any
        return OptimalSafePolicy(policy=mat, value=r_val, cost=c_val,
                                 feasible=False, mixture_weight=0.0, state_values=v_r)
    if best_any[0] <= best_feasible[0] + 1e-15:
        r_val, c_val, mat, v_r = best_feasible
        return OptimalSafePolicy(policy=mat, value=r_val, cost=c_val,
                                 feasible=True, mixture_weight=0.0, state_values=v_r)

    # mix the reward-best infeasible policy with the best feasible one and
    # bisect the mixing weight onto the constraint boundary
    lo_mat, hi_mat = best_feasible[2], best_any[2]
    lo_w, hi_w = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo_w + hi_w)
        _, c_val, _ = evaluate((1 - mid) * lo_mat + mid * hi_mat)
        if c_val <= limit:
            lo_w = mid
        else:
            hi_w = mid
    mix = (1 - lo_w) * lo_mat + lo_w * hi_mat
    r_val, c_val, v_r = evaluate(mix)
    if r_val > best_feasible[0] and c_val <= limit + 1e-9:
        return OptimalSafePolicy(policy=mix, value=r_val, cost=c_val,
                                 feasible=True, mixture_weight=lo_w, state_values=v_r)
    r_val, c_val, mat, v_r = best_feasible
    return OptimalSafePolicy(policy=mat, value=r_val, cost=c_val,
                             feasible=True, mixture_weight=0.0, state_values=v_r)


def _gated_reward_solve(spec: CmdpTabularSpec, policy: np.ndarray,
                        gate: np.ndarray) -> np.ndarray:
    """Solve the reward backup whose bootstrap is zeroed on closed gates."""
    s_n, a_n = spec.n_states, spec.n_actions
    gated_policy = policy * gate
    m = (spec.transitions[:, :, :, None] * gated_policy[None, None, :, :]
         ).reshape(s_n * a_n, s_n * a_n)
    q_vec = np.linalg.solve(np.eye(s_n * a_n) - spec.gamma * m,
                            spec.rewards.reshape(-1))
    return q_vec.reshape(s_n, a_n)


def _behavior_occupancy(spec: CmdpTabularSpec, pi_beta: TabularBehaviorPolicy) -> np.ndarray:
    """Exact discounted state occupancy of the empirical behavior policy.

    Unvisited states get a uniform action row; they are absorbing or
    unreachable in practice and carry no Bellman residual either way.
    """
    probs = pi_beta.probs.copy()
    probs[~pi_beta.visited] = 1.0 / probs.shape[1]
    p_state = np.einsum("sap,sa->sp", spec.transitions, probs)
    occ = np.linalg.solve(np.eye(spec.n_states) - spec.gamma * p_state.T,
                          (1.0 - spec.gamma) * spec.initial)
    occ = np.clip(occ, 0.0, None)
    return occ / occ.sum()


def _policy_occupancy(spec: CmdpTabularSpec, policy: np.ndarray) -> np.ndarray:
    p_state = np.einsum("sap,sa->sp", spec.transitions, policy)
    occ = np.linalg.solve(np.eye(spec.n_states) - spec.gamma * p_state.T,
                          (1.0 - spec.gamma) * spec.initial)
    return np.clip(occ, 0.0, None)


@dataclass
class TabularCpqResult:
    policy: np.ndarray
    q_reward: np.ndarray
    q_cost_hat: np.ndarray
    report: TheoremTwoReport
    alpha: float
    nu: np.ndarray
    iterations: int


def tabular_cpq(spec: CmdpTabularSpec, dataset: OfflineDataset,
                eps: float = 0.1, alpha: float | None = None,
                limit: float | None = None, nu: np.ndarray | None = None,
                max_iterations: int = 200) -> TabularCpqResult:
    """Constraints-penalized learning with exact tables instead of networks.

    Repeats (penalized cost evaluation, gated reward evaluation, gated greedy
    improvement) with exact linear solves.  Improvement switches one state
    per round (the one with the largest open-gate advantage), which keeps the
    self-referential gates from flipping many states at once and settling on
    an over-costly policy.  Candidate actions are restricted to those present
    in the dataset.  Finally assembles the performance-bound diagnostics
    against the enumeration oracle.
    """
    limit = spec.limit if limit is None else limit
    pi_beta = empirical_behavior_policy(dataset)
    if nu is None:
        nu = default_ood_weights(pi_beta, eps)
    supported = pi_beta.counts > 0
    # unvisited states (e.g. the absorbing goal) may take any action
    supported[~pi_beta.visited] = True

    # start from the cheapest supported action everywhere
    policy = np.zeros((spec.n_states, spec.n_actions))
    for s in range(spec.n_states):
        allowed = np.flatnonzero(supported[s])
        policy[s, allowed[np.argmin(spec.costs[s, allowed])]] = 1.0

    fallback_states: list[int] = []
    alpha_used = 0.0
    q_hat_c = q_r = None
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        if alpha is None:
            bound = alpha_bound(spec, policy, pi_beta.probs, nu, limit, eps,
                                visited=pi_beta.visited)
            alpha_used = 2.0 * bound.alpha_minimal
        else:
            alpha_used = alpha
        q_hat_c = penalized_cost_fixed_point(spec, policy, pi_beta.probs, nu,
                                             alpha_used).q
        gate = q_hat_c <= limit + 1e-12
        q_r = _gated_reward_solve(spec, policy, gate.astype(np.float64))

        # one-state greedy switch with the largest open-gate advantage
        fallback_states = []
        best_switch = None
        for s in range(spec.n_states):
            current = int(np.argmax(policy[s]))
            open_actions = np.flatnonzero(gate[s] & supported[s])
            if open_actions.size == 0:
                safest = int(np.argmin(np.where(supported[s], q_hat_c[s], np.inf)))
                fallback_states.append(s)
                if safest != current:
                    best_switch = (np.inf, s, safest)
                continue
            best = open_actions[np.argmax(q_r[s, open_actions])]
            if not gate[s, current]:
                # the current action is over the limit: leaving it is urgent
                gain = np.inf
            else:
                gain = q_r[s, best] - q_r[s, current]
            if best != current and gain > 1e-12:
                if best_switch is None or gain > best_switch[0]:
                    best_switch = (gain, s, int(best))
        if best_switch is None:
            break
        _, s, a = best_switch
        policy[s] = 0.0
        policy[s, a] = 1.0

    # ---- diagnostics -----------------------------------------------------
    oracle = optimal_safe_policy(spec, limit=limit)
    v_hat_r = state_values(policy, q_r)
    v_hat_c = state_values(policy, q_hat_c)
    dataset_states = pi_beta.visited
    support = pi_beta.counts > 0

    gate = (q_hat_c <= limit + 1e-12).astype(np.float64)
    gated_policy = policy * gate

    def penalized_backup(q_table: np.ndarray) -> np.ndarray:
        boot = np.einsum("sap,pb->sab", spec.transitions, gated_policy * q_table)
        return spec.rewards + spec.gamma * boot.sum(axis=2)

    q_star = exact_policy_eval(spec, oracle.policy, "reward").q
    resid_learned = np.abs(q_r - penalized_backup(q_r))
    resid_star = np.abs(q_star - penalized_backup(q_star))
    delta_hat = float(max(np.max((resid_learned ** 2)[support], initial=0.0),
                          np.max((resid_star ** 2)[support], initial=0.0)))

    mu_beta = _behavior_occupancy(spec, pi_beta)
    mu_pi = _policy_occupancy(spec, policy)
    visited_by_pi = mu_pi > 1e-12
    g_eps = float(np.min(mu_beta[visited_by_pi])) if visited_by_pi.any() else 0.0
    if g_eps > 0.0:
        big_g = math.sqrt((1.0 - spec.gamma) / spec.gamma) + math.sqrt(eps / g_eps)
        bound = 4.0 * spec.gamma / (1.0 - spec.gamma) ** 3 * big_g * math.sqrt(delta_hat)
    else:
        big_g = bound = math.inf

    value_gap = float(np.max(np.abs(oracle.state_values - v_hat_r)[dataset_states]))
    cost_slack = float(np.max((v_hat_c - limit)[dataset_states]))
    report = TheoremTwoReport(
        v_star=oracle.state_values, v_hat_r=v_hat_r, v_hat_c=v_hat_c,
        dataset_states=dataset_states, limit=limit, eps=eps, gamma=spec.gamma,
        delta_hat=delta_hat, g_eps=g_eps, big_g=big_g, bound=bound,
        value_gap=value_gap, cost_slack=cost_slack,
        part1_ok=cost_slack <= 1e-6,
        part2_ok=value_gap <= bound + 1e-9,
        fallback_states=fallback_states)
    return TabularCpqResult(policy=policy, q_reward=q_r, q_cost_hat=q_hat_c,
                            report=report, alpha=alpha_used, nu=nu,
                            iterations=iterations)


def gaussian_head_policy_matrix(means: np.ndarray, log_stds: np.ndarray,
                                deterministic: bool = True) -> np.ndarray:
    """Chain policy matrix induced by a squashed-Gaussian head.

    The 1-d embedding maps positive actions to the risky arm, so under the
    stochastic head P(risky|s) = Phi(mean/std); the deterministic head picks
    the sign of the mean.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1)
    log_stds = np.asarray(log_stds, dtype=np.float64).reshape(-1)
    if deterministic:
        p_risky = (means > 0.0).astype(np.float64)
    else:
        z = means / np.exp(log_stds)
        p_risky = np.array([0.5 * (1.0 + math.erf(x / math.sqrt(2.0))) for x in z])
    return np.stack([1.0 - p_risky, p_risky], axis=1)
