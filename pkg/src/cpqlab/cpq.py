"""Constraints-penalized Q-learning for offline data.

The agent keeps two reward critics (bootstrapping from their minimum), one
cost critic, target copies of all three, a squashed-Gaussian actor, and a
dual weight ``alpha``:

* cost critic - Bellman regression on observed costs plus an
  ``alpha``-weighted term that pushes up Q_c on policy actions the behavior
  model flags as out-of-distribution, so unfamiliar actions read as costly;
* ``alpha`` - dual ascent toward a target level ``limit_cost_factor * limit``
  for those flagged actions, so the push calibrates itself;
* reward critics - regression on backups whose bootstrap term is zeroed
  whenever the target cost critic puts the successor action over the limit;
* actor - maximizes the min reward critic through reparameterized samples,
  gated (as a constant factor) by the live cost critic's limit test.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import nn, serial
from .data import OfflineDataset
from .nn import autodiff as ad
from .ood import BehaviorCVAE
from .validation import check_batch_2d, check_fitted


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, cause: Exception, trace: list[dict]):
        super().__init__(f"training produced a non-finite loss at step {step}: {cause}")
        self.step = step
        self.trace = trace


def actor_distribution(actor: nn.MlpParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pre-squash Gaussian head (mean, log_std) for each observation row."""
    out = nn.mlp_forward(actor, obs)
    d = out.shape[-1] // 2
    return out[..., :d], np.clip(out[..., d:], nn.LOG_STD_MIN, nn.LOG_STD_MAX)


def sample_actions(actor: nn.MlpParams, obs: np.ndarray, rng: np.random.Generator,
                   n: int = 1) -> np.ndarray:
    """n stochastic actions per row from one forward pass; shape (rows, n, d)."""
    mean, log_std = actor_distribution(actor, obs)
    noise = rng.standard_normal((obs.shape[0], n, mean.shape[-1]))
    return np.tanh(mean[:, None, :] + np.exp(log_std)[:, None, :] * noise)


def critic_value(critic: nn.MlpParams, obs: np.ndarray, act: np.ndarray) -> np.ndarray:
    return nn.mlp_forward(critic, np.concatenate([obs, act], axis=-1))[..., 0]


def _critic_graph(leaves: list[ad.Var], obs: np.ndarray, act) -> ad.Var:
    x = ad.concat([ad.as_var(obs), ad.as_var(act)], axis=1)
    return nn.forward_graph(leaves, x)


def cost_critic_loss_graph(qc_leaves: list[ad.Var], obs: np.ndarray,
                           act: np.ndarray, targets: np.ndarray,
                           penalty_obs: np.ndarray, penalty_act: np.ndarray,
                           penalty_weights: np.ndarray, alpha: float
                           ) -> tuple[ad.Var, float, float, np.ndarray]:
    """Bellman MSE minus alpha times the weighted mean Q_c of flagged actions.

    `penalty_weights` must average each state's flagged actions and then the
    nonempty states (so the term matches "mean over nonempty flag sets");
    pass empty penalty rows to drop the term entirely.  Also returns the
    critic's predictions on the batch pairs for diagnostics.
    """
    pred = _critic_graph(qc_leaves, obs, act)
    bellman = ad.vmean(ad.square(ad.sub(pred, targets.reshape(-1, 1))))
    if len(penalty_obs) == 0:
        return bellman, float(bellman.value), 0.0, pred.value[:, 0]
    flagged = _critic_graph(qc_leaves, penalty_obs, penalty_act)
    penalty = ad.vsum(ad.mul(flagged, penalty_weights.reshape(-1, 1)))
    loss = ad.sub(bellman, ad.mul(penalty, alpha))
    return loss, float(bellman.value), float(penalty.value), pred.value[:, 0]


def reward_critic_loss_graph(qr_leaves: list[ad.Var], obs: np.ndarray,
                             act: np.ndarray, targets: np.ndarray) -> ad.Var:
    pred = _critic_graph(qr_leaves, obs, act)
    return ad.vmean(ad.square(ad.sub(pred, targets.reshape(-1, 1))))


def cp_bellman_target(qr1_target: nn.MlpParams, qr2_target: nn.MlpParams,
                      qc_target: nn.MlpParams, actor: nn.MlpParams,
                      next_obs: np.ndarray, rewards: np.ndarray,
                      done: np.ndarray, gamma: float, limit: float,
                      rng: np.random.Generator, n_samples: int = 1,
                      next_actions: np.ndarray | None = None) -> np.ndarray:
    """Backup targets whose bootstrap is gated by the target cost critic.

    target = r + gamma * (1 - done) * mean_k[ 1(Qc'(s', a') <= limit)
             * min(Qr1', Qr2')(s', a') ] with a' drawn from the live actor
    (or supplied through `next_actions`, shape (rows, k, act_dim)).
    """
    if next_actions is None:
        next_actions = sample_actions(actor, next_obs, rng, n=n_samples)
    rows, k, _ = next_actions.shape
    flat_obs = np.repeat(next_obs, k, axis=0)
    flat_act = next_actions.reshape(rows * k, -1)
    q_min = np.minimum(critic_value(qr1_target, flat_obs, flat_act),
                       critic_value(qr2_target, flat_obs, flat_act))
    gate = critic_value(qc_target, flat_obs, flat_act) <= limit
    boot = (gate * q_min).reshape(rows, k).mean(axis=1)
    return rewards + gamma * (1.0 - done) * boot


def policy_loss_graph(actor_leaves: list[ad.Var], qr1: nn.MlpParams,
                      qr2: nn.MlpParams, qc: nn.MlpParams, obs: np.ndarray,
                      noise: np.ndarray, limit: float) -> tuple[ad.Var, float]:
    """Gated policy objective: -mean_s 1(Qc(s, a) <= limit) * min Qr(s, a).

    The indicator is evaluated on the live cost critic at the sampled action
    and enters as a constant, so gradients flow through the reward critics
    and the reparameterized action only where the gate is open.
    """
    out = nn.forward_graph(actor_leaves, obs)
    mean, log_std = nn.split_heads(out, noise.shape[-1])
    log_std = ad.clip(log_std, nn.LOG_STD_MIN, nn.LOG_STD_MAX)
    action = ad.tanh(ad.add(mean, ad.mul(ad.exp(log_std), noise)))

    gate = (critic_value(qc, obs, action.value) <= limit).astype(np.float64)
    q1 = _critic_graph(nn.leaves(qr1, requires_grad=False), obs, action)
    q2 = _critic_graph(nn.leaves(qr2, requires_grad=False), obs, action)
    q_min = ad.minimum(q1, q2)
    loss = ad.mul(ad.vmean(ad.mul(q_min, gate.reshape(-1, 1))), -1.0)
    return loss, float(gate.mean())


def alpha_update(alpha: float, mean_flagged_qc: float, target_level: float,
                 alpha_lr: float, cap: float = 1e6) -> float:
    """Dual ascent: grow alpha while flagged actions stay under the target level."""
    return float(np.clip(alpha + alpha_lr * (target_level - mean_flagged_qc), 0.0, cap))


def _penalty_rows(obs: np.ndarray, candidates: np.ndarray,
                  scores: np.ndarray, threshold: float
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Flatten flagged candidate actions into rows with per-row mean weights.

    Weights implement: average within each state's flagged set, then across
    states that flagged anything.  Returns (rows_obs, rows_act, weights,
    fraction of states with at least one flagged action).
    """
    mask = scores >= threshold
    m_per_state = mask.sum(axis=1)
    nonempty = m_per_state > 0
    n_nonempty = int(nonempty.sum())
    if n_nonempty == 0:
        d = candidates.shape[-1]
        return np.empty((0, obs.shape[1])), np.empty((0, d)), np.empty(0), 0.0
    state_idx, cand_idx = np.nonzero(mask)
    rows_obs = obs[state_idx]
    rows_act = candidates[state_idx, cand_idx]
    weights = 1.0 / (m_per_state[state_idx] * n_nonempty)
    return rows_obs, rows_act, weights, n_nonempty / len(obs)


class CPQ(BaseEstimator):
    """Offline constrained policy learner over a fixed transition dataset.

    Parameters mirror the training loop: discount `gamma`, `batch_size`,
    learning rates for critics/actor/dual weight, polyak rate `tau`, the
    number of policy samples scored for OOD flagging per step
    (`n_ood_samples`), the backup expectation sample count
    (`target_action_samples`), network widths, and the cost `limit` with its
    dual target multiplier `limit_cost_factor`.
    """

    def __init__(self, limit: float = 30.0, gamma: float = 0.995,
                 steps: int = 50000, batch_size: int = 256,
                 critic_lr: float = 1e-3, actor_lr: float = 1e-5,
                 alpha_lr: float = 1e-3, tau: float = 0.005,
                 n_ood_samples: int = 10, target_action_samples: int = 1,
                 limit_cost_factor: float = 1.5,
                 actor_hidden: tuple[int, ...] = (300, 300),
                 critic_hidden: tuple[int, ...] = (400, 400),
                 alpha_cap: float = 1e6, ood_threshold: float | None = None,
                 log_interval: int = 200, random_state: int = 0):
        self.limit = limit
        self.gamma = gamma
        self.steps = steps
        self.batch_size = batch_size
        self.critic_lr = critic_lr
        self.actor_lr = actor_lr
        self.alpha_lr = alpha_lr
        self.tau = tau
        self.n_ood_samples = n_ood_samples
        self.target_action_samples = target_action_samples
        self.limit_cost_factor = limit_cost_factor
        self.actor_hidden = actor_hidden
        self.critic_hidden = critic_hidden
        self.alpha_cap = alpha_cap
        self.ood_threshold = ood_threshold
        self.log_interval = log_interval
        self.random_state = random_state

    def _init_networks(self, obs_dim: int, act_dim: int,
                       rng: np.random.Generator) -> None:
        actor_sizes = [obs_dim, *self.actor_hidden, 2 * act_dim]
        critic_sizes = [obs_dim + act_dim, *self.critic_hidden, 1]
        self.actor_ = nn.init_mlp(actor_sizes, rng)
        self.qr1_ = nn.init_mlp(critic_sizes, rng)
        self.qr2_ = nn.init_mlp(critic_sizes, rng)
        self.qc_ = nn.init_mlp(critic_sizes, rng)
        self.qr1_target_ = self.qr1_.copy()
        self.qr2_target_ = self.qr2_.copy()
        self.qc_target_ = self.qc_.copy()
        self.alpha_ = 0.0
        self.obs_dim_ = obs_dim
        self.act_dim_ = act_dim

    def fit(self, dataset: OfflineDataset, ood_model: BehaviorCVAE,
            step_hook=None) -> "CPQ":
        """Run the offline training loop against a dataset and a fitted OOD model.

        `step_hook(step, agent)`, when given, is called after every step;
        the harness uses it for evaluation scheduling.
        """
        check_fitted(ood_model, "encoder_")
        arrays = dataset.to_arrays()
        obs_all, act_all = arrays["obs"], arrays["act"]
        next_all, rew_all = arrays["next_obs"], arrays["reward"]
        cost_all, done_all = arrays["cost"], arrays["done"]
        n = len(obs_all)
        if n == 0:
            raise ValueError("cannot fit on an empty dataset")
        threshold = (ood_model.threshold_ if self.ood_threshold is None
                     else self.ood_threshold)
        l_c = self.limit_cost_factor * self.limit
        rng = np.random.default_rng(np.random.PCG64(self.random_state))
        self._init_networks(obs_all.shape[1], act_all.shape[1], rng)

        adam_qc = nn.adam_init(self.qc_, self.critic_lr)
        adam_qr1 = nn.adam_init(self.qr1_, self.critic_lr)
        adam_qr2 = nn.adam_init(self.qr2_, self.critic_lr)
        adam_actor = nn.adam_init(self.actor_, self.actor_lr)

        trace: list[dict] = []
        warned_gate = False
        for step in range(self.steps):
            idx = rng.integers(0, n, size=min(self.batch_size, n))
            obs, act = obs_all[idx], act_all[idx]
            next_obs = next_all[idx]
            rew, cost, done = rew_all[idx], cost_all[idx], done_all[idx]
            try:
                # flag OOD actions among policy samples at the batch states
                cands = sample_actions(self.actor_, obs, rng, n=self.n_ood_samples)
                flat = cands.reshape(-1, self.act_dim_)
                scores = ood_model.kl_score(
                    np.repeat(obs, self.n_ood_samples, axis=0), flat
                ).reshape(len(obs), self.n_ood_samples)
                p_obs, p_act, p_w, flag_frac = _penalty_rows(obs, cands, scores,
                                                             threshold)

                # cost critic: plain Bellman target plus the flagged-action push
                k = self.target_action_samples
                next_act = sample_actions(self.actor_, next_obs, rng, n=k)
                next_obs_rep = np.repeat(next_obs, k, axis=0) if k > 1 else next_obs
                next_act_flat = next_act.reshape(-1, self.act_dim_)
                qc_next = critic_value(self.qc_target_, next_obs_rep,
                                       next_act_flat).reshape(-1, k).mean(axis=1)
                y_c = cost + self.gamma * (1.0 - done) * qc_next
                qc_leaves = nn.leaves(self.qc_)
                qc_loss, bellman_val, flagged_qc, qc_data = cost_critic_loss_graph(
                    qc_leaves, obs, act, y_c, p_obs, p_act, p_w, self.alpha_)
                qc_grads = nn.grads_to_params(ad.grads_of(qc_loss, qc_leaves), self.qc_)
                data_gate_frac = float((qc_data <= self.limit).mean())
                self.qc_, adam_qc = nn.adam_step(self.qc_, qc_grads, adam_qc)

                if len(p_obs) > 0:
                    self.alpha_ = alpha_update(self.alpha_, flagged_qc, l_c,
                                               self.alpha_lr, self.alpha_cap)

                # reward critics against the gated double-Q backup; the backup
                # expectation reuses the next-action samples drawn above
                y_r = cp_bellman_target(
                    self.qr1_target_, self.qr2_target_, self.qc_target_,
                    self.actor_, next_obs, rew, done, self.gamma, self.limit,
                    rng, n_samples=k, next_actions=next_act)
                qr1_leaves = nn.leaves(self.qr1_)
                qr2_leaves = nn.leaves(self.qr2_)
                loss_r1 = reward_critic_loss_graph(qr1_leaves, obs, act, y_r)
                loss_r2 = reward_critic_loss_graph(qr2_leaves, obs, act, y_r)
                grads = ad.grads_of(ad.add(loss_r1, loss_r2),
                                    qr1_leaves + qr2_leaves)
                n1 = len(qr1_leaves)
                self.qr1_, adam_qr1 = nn.adam_step(
                    self.qr1_, nn.grads_to_params(grads[:n1], self.qr1_), adam_qr1)
                self.qr2_, adam_qr2 = nn.adam_step(
                    self.qr2_, nn.grads_to_params(grads[n1:], self.qr2_), adam_qr2)
                losses_r = [float(loss_r1.value), float(loss_r2.value)]

                # actor through the gated min-critic objective
                pi_noise = rng.standard_normal((len(obs), self.act_dim_))
                actor_leaves = nn.leaves(self.actor_)
                pi_loss, gate_frac = policy_loss_graph(
                    actor_leaves, self.qr1_, self.qr2_, self.qc_, obs,
                    pi_noise, self.limit)
                actor_grads = nn.grads_to_params(
                    ad.grads_of(pi_loss, actor_leaves), self.actor_)
                self.actor_, adam_actor = nn.adam_step(self.actor_, actor_grads,
                                                       adam_actor)
            except ad.NumericError as exc:
                raise TrainingDivergedError(step, exc, trace) from exc

            self.qc_target_ = nn.soft_update(self.qc_target_, self.qc_, self.tau)
            self.qr1_target_ = nn.soft_update(self.qr1_target_, self.qr1_, self.tau)
            self.qr2_target_ = nn.soft_update(self.qr2_target_, self.qr2_, self.tau)

            if data_gate_frac == 0.0 and not warned_gate:
                warnings.warn(
                    f"step {step}: cost critic gates out every dataset action; "
                    "training may stall", RuntimeWarning, stacklevel=2)
                warned_gate = True
            if step % self.log_interval == 0 or step == self.steps - 1:
                trace.append({
                    "step": step,
                    "qc_loss": bellman_val,
                    "qr1_loss": losses_r[0],
                    "qr2_loss": losses_r[1],
                    "pi_loss": float(pi_loss.value),
                    "alpha": self.alpha_,
                    "flagged_qc_mean": flagged_qc,
                    "flagged_state_frac": flag_frac,
                    "gate_frac_pi": gate_frac,
                    "gate_frac_data": data_gate_frac,
                })
            if step_hook is not None:
                step_hook(step, self)
        self.metrics_ = trace
        return self

    # --- policy interface -------------------------------------------------
    def predict(self, obs) -> np.ndarray:
        """Deterministic head: tanh of the pre-squash mean."""
        check_fitted(self, "actor_")
        obs = check_batch_2d(obs, "obs", self.obs_dim_)
        mean, _ = actor_distribution(self.actor_, obs)
        return np.tanh(mean)

    def sample(self, obs, rng: np.random.Generator) -> np.ndarray:
        check_fitted(self, "actor_")
        obs = check_batch_2d(obs, "obs", self.obs_dim_)
        return sample_actions(self.actor_, obs, rng, n=1)[:, 0, :]

    def action_distribution(self, obs) -> tuple[np.ndarray, np.ndarray]:
        check_fitted(self, "actor_")
        obs = check_batch_2d(obs, "obs", self.obs_dim_)
        return actor_distribution(self.actor_, obs)


_NET_ATTRS = ("actor_", "qr1_", "qr2_", "qc_", "qr1_target_", "qr2_target_",
              "qc_target_")


def save_agent(agent: CPQ, path) -> None:
    check_fitted(agent, "actor_")
    records = []
    for attr in _NET_ATTRS:
        net: nn.MlpParams = getattr(agent, attr)
        for i, (w, b) in enumerate(net.layers):
            records.append({"name": f"{attr}.w{i}", "shape": list(w.shape),
                            "data": w.reshape(-1).tolist()})
            records.append({"name": f"{attr}.b{i}", "shape": list(b.shape),
                            "data": b.reshape(-1).tolist()})
    meta = {
        "params": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in agent.get_params().items()},
        "alpha": agent.alpha_,
        "obs_dim": agent.obs_dim_,
        "act_dim": agent.act_dim_,
    }
    serial.dump_records(path, kind="cpq-agent", meta=meta, records=records)


def load_agent(path) -> CPQ:
    meta, records = serial.load_records(path, expect_kind="cpq-agent")
    params = dict(meta["params"])
    for key in ("actor_hidden", "critic_hidden"):
        params[key] = tuple(params[key])
    agent = CPQ(**params)
    arrays = {rec["name"]: np.asarray(rec["data"], float).reshape(rec["shape"])
              for rec in records}
    for attr in _NET_ATTRS:
        layers = []
        i = 0
        while f"{attr}.w{i}" in arrays:
            layers.append((arrays[f"{attr}.w{i}"], arrays[f"{attr}.b{i}"]))
            i += 1
        setattr(agent, attr, nn.MlpParams(layers))
    agent.alpha_ = meta["alpha"]
    agent.obs_dim_ = meta["obs_dim"]
    agent.act_dim_ = meta["act_dim"]
    agent.metrics_ = []
    return agent
