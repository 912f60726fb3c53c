"""Conditional-VAE behavior model and latent-space OOD detection.

The model is fit on dataset (state, action) pairs with a beta-weighted ELBO.
An action is scored by the closed-form KL divergence between the encoder's
latent posterior and the standard-normal prior: actions the behavior data
explains well land near the prior, unfamiliar ones do not.  The decision
threshold is a percentile of the scores over the training data.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import nn, serial
from .data import OfflineDataset
from .nn import autodiff as ad
from .validation import check_batch_2d, check_fitted


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"training produced a non-finite loss at step {step}: {cause}")
        self.step = step


def cvae_elbo_graph(enc_leaves: list[ad.Var], dec_leaves: list[ad.Var],
                    obs: np.ndarray, act: np.ndarray, noise: np.ndarray,
                    beta: float, latent_dim: int) -> tuple[ad.Var, ad.Var, ad.Var]:
    """Build (total loss, reconstruction term, kl term) on the autodiff graph.

    total = mean squared reconstruction error (summed over action dims)
          + beta * mean KL(q(z|s,a) || N(0, I)).
    """
    enc_out = nn.forward_graph(enc_leaves, np.concatenate([obs, act], axis=1))
    z_mean, z_log_std = nn.split_heads(enc_out, latent_dim)
    z_log_std = ad.clip(z_log_std, nn.LOG_STD_MIN, nn.LOG_STD_MAX)

    z = ad.add(z_mean, ad.mul(ad.exp(z_log_std), noise))
    dec_in = ad.concat([ad.Var(obs), z], axis=1)
    decoded = nn.forward_graph(dec_leaves, dec_in, output="tanh")

    recon = ad.vmean(ad.vsum(ad.square(ad.sub(decoded, act)), axis=1))
    var_term = ad.exp(ad.mul(z_log_std, 2.0))
    kl_per = ad.vsum(ad.sub(ad.add(ad.square(z_mean), var_term),
                            ad.add(ad.mul(z_log_std, 2.0), 1.0)), axis=1)
    kl = ad.mul(ad.vmean(kl_per), 0.5)
    total = ad.add(recon, ad.mul(kl, beta))
    return total, recon, kl


def kl_to_standard_normal(mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Closed-form KL(N(mean, diag std^2) || N(0, I)) per row."""
    var = np.exp(2.0 * log_std)
    return 0.5 * (mean ** 2 + var - 1.0 - 2.0 * log_std).sum(axis=-1)


class BehaviorCVAE(BaseEstimator):
    """State-conditional VAE over dataset actions, used as an OOD scorer.

    Parameters
    ----------
    latent_dim : latent width; defaults to twice the action dimension.
    hidden : width of the two hidden layers in encoder and decoder.
    beta : weight on the KL term of the ELBO.
    steps : Adam steps on minibatch ELBO.
    batch_size, lr : optimization hyperparameters.
    percentile : calibration percentile for the decision threshold.
    random_state : seed for init, batching and reparameterization noise.
    """

    def __init__(self, latent_dim: int | None = None, hidden: int = 128,
                 beta: float = 1.5, steps: int = 20000, batch_size: int = 256,
                 lr: float = 1e-3, percentile: float = 75.0, random_state: int = 0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.beta = beta
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.percentile = percentile
        self.random_state = random_state

    def _arrays(self, dataset) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(dataset, OfflineDataset):
            arrays = dataset.to_arrays()
            return arrays["obs"], arrays["act"]
        obs, act = dataset
        return np.asarray(obs, float), np.asarray(act, float)

    def fit(self, dataset, y=None) -> "BehaviorCVAE":
        """Train on (state, action) pairs from an OfflineDataset or (obs, act)."""
        obs, act = self._arrays(dataset)
        if len(obs) == 0:
            raise ValueError("cannot fit on an empty dataset")
        rng = np.random.default_rng(np.random.PCG64(self.random_state))
        self.obs_dim_ = obs.shape[1]
        self.act_dim_ = act.shape[1]
        self.latent_dim_ = self.latent_dim or 2 * self.act_dim_
        enc_sizes = [self.obs_dim_ + self.act_dim_, self.hidden, self.hidden,
                     2 * self.latent_dim_]
        dec_sizes = [self.obs_dim_ + self.latent_dim_, self.hidden, self.hidden,
                     self.act_dim_]
        self.encoder_ = nn.init_mlp(enc_sizes, rng)
        self.decoder_ = nn.init_mlp(dec_sizes, rng, output="tanh")
        enc_adam = nn.adam_init(self.encoder_, self.lr)
        dec_adam = nn.adam_init(self.decoder_, self.lr)
        batch = min(self.batch_size, len(obs))
        trace = []
        for step in range(self.steps):
            idx = rng.integers(0, len(obs), size=batch)
            noise = rng.standard_normal((batch, self.latent_dim_))
            enc_leaves = nn.leaves(self.encoder_)
            dec_leaves = nn.leaves(self.decoder_)
            try:
                total, _, _ = cvae_elbo_graph(enc_leaves, dec_leaves, obs[idx],
                                              act[idx], noise, self.beta,
                                              self.latent_dim_)
                grads = ad.grads_of(total, enc_leaves + dec_leaves)
            except ad.NumericError as exc:
                raise TrainingDivergedError(step, exc) from exc
            n_enc = len(enc_leaves)
            enc_grads = nn.grads_to_params(grads[:n_enc], self.encoder_)
            dec_grads = nn.grads_to_params(grads[n_enc:], self.decoder_)
            self.encoder_, enc_adam = nn.adam_step(self.encoder_, enc_grads, enc_adam)
            self.decoder_, dec_adam = nn.adam_step(self.decoder_, dec_grads, dec_adam)
            trace.append(float(total.value))
        self.loss_trace_ = trace
        self.threshold_ = calibrate_threshold(self, (obs, act), self.percentile)
        return self

    def encode(self, obs, act) -> tuple[np.ndarray, np.ndarray]:
        """Latent posterior (mean, log_std) for each (state, action) row."""
        check_fitted(self, "encoder_")
        obs = check_batch_2d(obs, "obs", self.obs_dim_)
        act = check_batch_2d(act, "act", self.act_dim_)
        out = nn.mlp_forward(self.encoder_, np.concatenate([obs, act], axis=1))
        mean = out[:, :self.latent_dim_]
        log_std = np.clip(out[:, self.latent_dim_:], nn.LOG_STD_MIN, nn.LOG_STD_MAX)
        return mean, log_std

    def kl_score(self, obs, act) -> np.ndarray:
        """Deterministic OOD score: latent KL to the standard-normal prior."""
        mean, log_std = self.encode(obs, act)
        return kl_to_standard_normal(mean, log_std)

    def reconstruct(self, obs, act, rng: np.random.Generator) -> np.ndarray:
        check_fitted(self, "decoder_")
        mean, log_std = self.encode(obs, act)
        z = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        obs = check_batch_2d(obs, "obs", self.obs_dim_)
        return nn.mlp_forward(self.decoder_, np.concatenate([obs, z], axis=1))


def calibrate_threshold(model: BehaviorCVAE, dataset, percentile: float) -> float:
    """Nearest-rank percentile of kl_score over all dataset pairs."""
    if not 0.0 < percentile <= 100.0:
        raise ValueError("percentile must lie in (0, 100]")
    obs, act = model._arrays(dataset)
    if len(obs) == 0:
        raise ValueError("cannot calibrate on an empty dataset")
    scores = np.sort(model.kl_score(obs, act))
    rank = int(np.ceil(percentile / 100.0 * len(scores)))
    return float(scores[max(rank, 1) - 1])


def select_ood_actions(model: BehaviorCVAE, obs, candidates,
                       threshold: float) -> np.ndarray:
    """Candidates at a single state whose kl_score is >= threshold (order kept).

    Ties at the threshold are included, matching the >= d extraction rule.
    """
    candidates = check_batch_2d(candidates, "candidates", model.act_dim_)
    if len(candidates) == 0:
        raise ValueError("candidates must be nonempty")
    obs = np.broadcast_to(np.asarray(obs, float).reshape(-1),
                          (len(candidates), model.obs_dim_))
    scores = model.kl_score(obs, candidates)
    return candidates[scores >= threshold]


def save_model(model: BehaviorCVAE, path) -> None:
    check_fitted(model, "encoder_")
    records = []
    for net_name, net in (("encoder", model.encoder_), ("decoder", model.decoder_)):
        for i, (w, b) in enumerate(net.layers):
            records.append({"name": f"{net_name}.w{i}", "shape": list(w.shape),
                            "data": w.reshape(-1).tolist()})
            records.append({"name": f"{net_name}.b{i}", "shape": list(b.shape),
                            "data": b.reshape(-1).tolist()})
    meta = {
        "params": model.get_params(),
        "obs_dim": model.obs_dim_,
        "act_dim": model.act_dim_,
        "latent_dim": model.latent_dim_,
        "threshold": model.threshold_,
        "decoder_output": "tanh",
    }
    serial.dump_records(path, kind="behavior-cvae", meta=meta, records=records)


def load_model(path) -> BehaviorCVAE:
    meta, records = serial.load_records(path, expect_kind="behavior-cvae")
    model = BehaviorCVAE(**meta["params"])
    model.obs_dim_ = meta["obs_dim"]
    model.act_dim_ = meta["act_dim"]
    model.latent_dim_ = meta["latent_dim"]
    model.threshold_ = meta["threshold"]
    arrays = {rec["name"]: np.asarray(rec["data"], float).reshape(rec["shape"])
              for rec in records}
    def collect(net_name: str, output: str) -> nn.MlpParams:
        layers = []
        i = 0
        while f"{net_name}.w{i}" in arrays:
            layers.append((arrays[f"{net_name}.w{i}"], arrays[f"{net_name}.b{i}"]))
            i += 1
        return nn.MlpParams(layers, output=output)
    model.encoder_ = collect("encoder", "identity")
    model.decoder_ = collect("decoder", meta["decoder_output"])
    model.loss_trace_ = []
    return model
