"""Comparison methods: behavior cloning on safe-tagged data, and a naive
dual-constrained actor-critic that couples plain offline Bellman critics with
two Lagrange multipliers (one for the cost limit, one for a divergence leash
to the dataset actions).

The naive method exists to demonstrate its own failure mode on mixed data:
leashing the policy to a safe/unsafe mixture either drags it over the cost
limit or strangles the reward signal; the multipliers cannot satisfy both
pressures at once.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import nn
from .data import OfflineDataset
from .nn import autodiff as ad
from .cpq import (
    TrainingDivergedError,
    actor_distribution,
    critic_value,
    reward_critic_loss_graph,
    sample_actions,
)
from .validation import check_batch_2d, check_fitted

_ATANH_CLIP = 1.0 - 1e-8


def gaussian_nll_graph(actor_leaves: list[ad.Var], obs: np.ndarray,
                       presquash_actions: np.ndarray) -> ad.Var:
    """Mean negative log-likelihood of pre-squash targets under the actor head.

    The tanh change-of-variables term depends only on the data, so dropping
    it leaves the argmax untouched.
    """
    out = nn.forward_graph(actor_leaves, obs)
    mean, log_std = nn.split_heads(out, presquash_actions.shape[-1])
    log_std = ad.clip(log_std, nn.LOG_STD_MIN, nn.LOG_STD_MAX)
    z = ad.mul(ad.sub(presquash_actions, mean), ad.exp(ad.mul(log_std, -1.0)))
    per_dim = ad.add(log_std, ad.mul(ad.square(z), 0.5))
    return ad.vmean(ad.vsum(per_dim, axis=1))


def mmd_squared(x: np.ndarray, y: np.ndarray,
                bandwidth: float | None = None) -> float:
    """Biased (V-statistic) Gaussian-kernel MMD^2 between two samples.

    Symmetric, nonnegative, and exactly zero when the samples coincide.
    Bandwidth defaults to the median pairwise squared distance over the
    pooled sample (1.0 when that median is zero).
    """
    x = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_2d(np.asarray(y, float))
    if bandwidth is None:
        bandwidth = _median_bandwidth(x, y)

    def kernel_mean(a, b):
        d2 = (np.square(a).sum(1)[:, None] + np.square(b).sum(1)[None, :]
              - 2.0 * a @ b.T)
        return float(np.exp(-np.clip(d2, 0.0, None) / bandwidth).mean())

    return max(kernel_mean(x, x) + kernel_mean(y, y) - 2.0 * kernel_mean(x, y), 0.0)


def _median_bandwidth(x: np.ndarray, y: np.ndarray, cap: int = 128) -> float:
    pooled = np.concatenate([x[:cap], y[:cap]], axis=0)
    d2 = (np.square(pooled).sum(1)[:, None] + np.square(pooled).sum(1)[None, :]
          - 2.0 * pooled @ pooled.T)
    med = float(np.median(np.clip(d2, 0.0, None)))
    return med if med > 0.0 else 1.0


def _mmd_graph(x: ad.Var, y: np.ndarray, bandwidth: float) -> ad.Var:
    """Differentiable V-statistic MMD^2 between policy samples and constants."""
    scale = -1.0 / bandwidth
    x2 = ad.vsum(ad.square(x), axis=1, keepdims=True)            # (n, 1)
    d_xx = ad.add(ad.add(x2, ad.transpose(x2)),
                  ad.mul(ad.matmul(x, ad.transpose(x)), -2.0))
    y2 = np.square(y).sum(1)[None, :]                            # (1, m)
    d_xy = ad.add(ad.add(x2, y2), ad.mul(ad.matmul(x, y.T), -2.0))
    k_yy = float(np.exp(np.clip(
        (np.square(y).sum(1)[:, None] + y2 - 2.0 * y @ y.T), 0.0, None
    ) * scale).mean())
    term_xx = ad.vmean(ad.exp(ad.mul(d_xx, scale)))
    term_xy = ad.vmean(ad.exp(ad.mul(d_xy, scale)))
    return ad.add(ad.add(term_xx, k_yy), ad.mul(term_xy, -2.0))


class SafeBehaviorCloning(BaseEstimator):
    """Maximum-likelihood fit of the squashed-Gaussian policy to safe-tagged data."""

    def __init__(self, steps: int = 5000, batch_size: int = 256, lr: float = 1e-3,
                 hidden: tuple[int, ...] = (300, 300), random_state: int = 0):
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.hidden = hidden
        self.random_state = random_state

    def fit(self, dataset: OfflineDataset, y=None, batch_hook=None) -> "SafeBehaviorCloning":
        safe = dataset.filter_source("safe")
        if len(safe) == 0:
            raise ValueError("dataset contains no safe-tagged samples")
        arrays = safe.to_arrays(dataset.env())
        obs_all, act_all = arrays["obs"], arrays["act"]
        sources = np.array([s.source for s in safe.samples])
        presquash = np.arctanh(np.clip(act_all, -_ATANH_CLIP, _ATANH_CLIP))
        rng = np.random.default_rng(np.random.PCG64(self.random_state))
        self.obs_dim_ = obs_all.shape[1]
        self.act_dim_ = act_all.shape[1]
        self.actor_ = nn.init_mlp([self.obs_dim_, *self.hidden, 2 * self.act_dim_], rng)
        adam = nn.adam_init(self.actor_, self.lr)
        trace = []
        batch = min(self.batch_size, len(obs_all))
        for step in range(self.steps):
            idx = rng.integers(0, len(obs_all), size=batch)
            if batch_hook is not None:
                batch_hook(sources[idx])
            leaves = nn.leaves(self.actor_)
            loss = gaussian_nll_graph(leaves, obs_all[idx], presquash[idx])
            grads = nn.grads_to_params(ad.grads_of(loss, leaves), self.actor_)
            self.actor_, adam = nn.adam_step(self.actor_, grads, adam)
            trace.append(float(loss.value))
        self.loss_trace_ = trace
        return self

    def predict(self, obs) -> np.ndarray:
        check_fitted(self, "actor_")
        obs = check_batch_2d(obs, "obs", self.obs_dim_)
        mean, _ = actor_distribution(self.actor_, obs)
        return np.tanh(mean)

    def action_distribution(self, obs) -> tuple[np.ndarray, np.ndarray]:
        check_fitted(self, "actor_")
        obs = check_batch_2d(obs, "obs", self.obs_dim_)
        return actor_distribution(self.actor_, obs)


class NaiveDualActorCritic(BaseEstimator):
    """Offline actor-critic with Lagrangian cost and divergence constraints.

    The actor maximizes Qr - lambda1 * Qc - lambda2 * MMD^2(policy actions,
    dataset actions); both multipliers follow projected dual ascent toward
    E[Qc] <= limit and MMD^2 <= xi unless `learn_multipliers` is off.
    """

    def __init__(self, limit: float = 30.0, gamma: float = 0.995,
                 steps: int = 20000, batch_size: int = 256,
                 critic_lr: float = 1e-3, actor_lr: float = 1e-4,
                 lambda_lr: float = 1e-3, tau: float = 0.005, xi: float = 0.05,
                 lambda1_init: float = 0.0, lambda2_init: float = 1.0,
                 learn_multipliers: bool = True,
                 actor_hidden: tuple[int, ...] = (300, 300),
                 critic_hidden: tuple[int, ...] = (400, 400),
                 log_interval: int = 200, random_state: int = 0):
        self.limit = limit
        self.gamma = gamma
        self.steps = steps
        self.batch_size = batch_size
        self.critic_lr = critic_lr
        self.actor_lr = actor_lr
        self.lambda_lr = lambda_lr
        self.tau = tau
        self.xi = xi
        self.lambda1_init = lambda1_init
        self.lambda2_init = lambda2_init
        self.learn_multipliers = learn_multipliers
        self.actor_hidden = actor_hidden
        self.critic_hidden = critic_hidden
        self.log_interval = log_interval
        self.random_state = random_state

    def fit(self, dataset: OfflineDataset, y=None) -> "NaiveDualActorCritic":
        arrays = dataset.to_arrays()
        obs_all, act_all = arrays["obs"], arrays["act"]
        next_all, rew_all = arrays["next_obs"], arrays["reward"]
        cost_all, done_all = arrays["cost"], arrays["done"]
        n = len(obs_all)
        if n == 0:
            raise ValueError("cannot fit on an empty dataset")
        rng = np.random.default_rng(np.random.PCG64(self.random_state))
        self.obs_dim_, self.act_dim_ = obs_all.shape[1], act_all.shape[1]
        critic_sizes = [self.obs_dim_ + self.act_dim_, *self.critic_hidden, 1]
        self.actor_ = nn.init_mlp(
            [self.obs_dim_, *self.actor_hidden, 2 * self.act_dim_], rng)
        self.qr_ = nn.init_mlp(critic_sizes, rng)
        self.qc_ = nn.init_mlp(critic_sizes, rng)
        self.qr_target_ = self.qr_.copy()
        self.qc_target_ = self.qc_.copy()
        self.lambda1_ = float(self.lambda1_init)
        self.lambda2_ = float(self.lambda2_init)
        adam_qr = nn.adam_init(self.qr_, self.critic_lr)
        adam_qc = nn.adam_init(self.qc_, self.critic_lr)
        adam_actor = nn.adam_init(self.actor_, self.actor_lr)
        trace: list[dict] = []
        batch = min(self.batch_size, n)
        for step in range(self.steps):
            idx = rng.integers(0, n, size=batch)
            obs, act = obs_all[idx], act_all[idx]
            rew, cost, done = rew_all[idx], cost_all[idx], done_all[idx]
            next_obs = next_all[idx]
            try:
                next_act = sample_actions(self.actor_, next_obs, rng, n=1)[:, 0, :]
                y_r = rew + self.gamma * (1 - done) * critic_value(
                    self.qr_target_, next_obs, next_act)
                y_c = cost + self.gamma * (1 - done) * critic_value(
                    self.qc_target_, next_obs, next_act)
                loss_vals = {}
                for name, target in (("qr_", y_r), ("qc_", y_c)):
                    net = getattr(self, name)
                    leaves = nn.leaves(net)
                    loss = reward_critic_loss_graph(leaves, obs, act, target)
                    grads = nn.grads_to_params(ad.grads_of(loss, leaves), net)
                    adam = adam_qr if name == "qr_" else adam_qc
                    net, adam = nn.adam_step(net, grads, adam)
                    setattr(self, name, net)
                    if name == "qr_":
                        adam_qr = adam
                    else:
                        adam_qc = adam
                    loss_vals[name] = float(loss.value)

                noise = rng.standard_normal((batch, self.act_dim_))
                leaves = nn.leaves(self.actor_)
                out = nn.forward_graph(leaves, obs)
                mean, log_std = nn.split_heads(out, self.act_dim_)
                log_std = ad.clip(log_std, nn.LOG_STD_MIN, nn.LOG_STD_MAX)
                action = ad.tanh(ad.add(mean, ad.mul(ad.exp(log_std), noise)))
                q_r = nn.forward_graph(nn.leaves(self.qr_, requires_grad=False),
                                       ad.concat([ad.Var(obs), action], axis=1))
                q_c = nn.forward_graph(nn.leaves(self.qc_, requires_grad=False),
                                       ad.concat([ad.Var(obs), action], axis=1))
                bandwidth = _median_bandwidth(action.value, act)
                divergence = _mmd_graph(action, act, bandwidth)
                objective = ad.sub(ad.vmean(q_r), ad.mul(ad.vmean(q_c), self.lambda1_))
                actor_loss = ad.add(ad.mul(objective, -1.0),
                                    ad.mul(divergence, self.lambda2_))
                grads = nn.grads_to_params(ad.grads_of(actor_loss, leaves),
                                           self.actor_)
                self.actor_, adam_actor = nn.adam_step(self.actor_, grads, adam_actor)
            except ad.NumericError as exc:
                raise TrainingDivergedError(step, exc, trace) from exc

            mean_qc = float(q_c.value.mean())
            mmd_val = float(divergence.value)
            if self.learn_multipliers:
                self.lambda1_ = max(0.0, self.lambda1_
                                    + self.lambda_lr * (mean_qc - self.limit))
                self.lambda2_ = max(0.0, self.lambda2_
                                    + self.lambda_lr * (mmd_val - self.xi))
            self.qr_target_ = nn.soft_update(self.qr_target_, self.qr_, self.tau)
            self.qc_target_ = nn.soft_update(self.qc_target_, self.qc_, self.tau)
            if step % self.log_interval == 0 or step == self.steps - 1:
                trace.append({
                    "step": step,
                    "qr_loss": loss_vals["qr_"],
                    "qc_loss": loss_vals["qc_"],
                    "actor_loss": float(actor_loss.value),
                    "mmd": mmd_val,
                    "mean_qc_pi": mean_qc,
                    "lambda1": self.lambda1_,
                    "lambda2": self.lambda2_,
                })
        self.metrics_ = trace
        return self

    def predict(self, obs) -> np.ndarray:
        check_fitted(self, "actor_")
        obs = check_batch_2d(obs, "obs", self.obs_dim_)
        mean, _ = actor_distribution(self.actor_, obs)
        return np.tanh(mean)

    def action_distribution(self, obs) -> tuple[np.ndarray, np.ndarray]:
        check_fitted(self, "actor_")
        obs = check_batch_2d(obs, "obs", self.obs_dim_)
        return actor_distribution(self.actor_, obs)
