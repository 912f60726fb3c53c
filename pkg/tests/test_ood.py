import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from cpqlab import generate_dataset, make_env
from cpqlab import nn
from cpqlab.nn import autodiff as ad
from cpqlab.ood import (
    BehaviorCVAE,
    calibrate_threshold,
    cvae_elbo_graph,
    kl_to_standard_normal,
    load_model,
    save_model,
    select_ood_actions,
)

from conftest import rng_of
from helpers import directional_fd_check


@pytest.fixture(scope="module")
def fitted_vae(pointmass_dataset_small):
    return BehaviorCVAE(hidden=32, steps=3000, batch_size=256,
                        random_state=0).fit(pointmass_dataset_small)


def test_kl_closed_form_values():
    assert kl_to_standard_normal(np.zeros((1, 3)), np.zeros((1, 3)))[0] == 0.0
    # mean (1, 0), std (1, 1): KL = 0.5 * 1^2
    kl = kl_to_standard_normal(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]]))
    assert kl[0] == pytest.approx(0.5)


def test_elbo_terms_against_hand_rolled(rng):
    obs = rng.standard_normal((8, 4))
    act = rng.uniform(-1, 1, (8, 2))
    noise = rng.standard_normal((8, 4))
    enc = nn.init_mlp([6, 16, 16, 8], rng)
    dec = nn.init_mlp([8, 16, 16, 2], rng, output="tanh")
    total, recon, kl = cvae_elbo_graph(nn.leaves(enc), nn.leaves(dec), obs, act,
                                       noise, beta=1.5, latent_dim=4)
    # independent forward pass with plain numpy
    head = nn.mlp_forward(enc, np.concatenate([obs, act], axis=1))
    mean, log_std = head[:, :4], np.clip(head[:, 4:], nn.LOG_STD_MIN, nn.LOG_STD_MAX)
    z = mean + np.exp(log_std) * noise
    decoded = nn.mlp_forward(dec, np.concatenate([obs, z], axis=1))
    recon_expected = (np.sum((decoded - act) ** 2, axis=1)).mean()
    kl_expected = kl_to_standard_normal(mean, log_std).mean()
    assert float(recon.value) == pytest.approx(recon_expected, rel=1e-12)
    assert float(kl.value) == pytest.approx(kl_expected, rel=1e-12)
    assert float(total.value) == pytest.approx(recon_expected + 1.5 * kl_expected,
                                               rel=1e-12)


def test_elbo_gradients_match_finite_differences(rng):
    obs = rng.standard_normal((6, 3))
    act = rng.uniform(-1, 1, (6, 2))
    noise = rng.standard_normal((6, 4))
    enc = nn.init_mlp([5, 8, 8, 8], rng)
    dec = nn.init_mlp([7, 8, 8, 2], rng, output="tanh")
    arrays = enc.flat() + dec.flat()
    n_enc = len(enc.flat())

    def build(leaves):
        total, _, _ = cvae_elbo_graph(leaves[:n_enc], leaves[n_enc:], obs, act,
                                      noise, beta=1.5, latent_dim=4)
        return total

    directional_fd_check(build, arrays, rng, n_points=15)


def test_fit_is_deterministic(pointmass_dataset_small):
    a = BehaviorCVAE(hidden=16, steps=60, random_state=5).fit(pointmass_dataset_small)
    b = BehaviorCVAE(hidden=16, steps=60, random_state=5).fit(pointmass_dataset_small)
    for wa, wb in zip(a.encoder_.flat() + a.decoder_.flat(),
                      b.encoder_.flat() + b.decoder_.flat()):
        np.testing.assert_array_equal(wa, wb)
    assert a.loss_trace_ == b.loss_trace_


def test_loss_trace_finite(fitted_vae):
    assert all(np.isfinite(v) for v in fitted_vae.loss_trace_)


def test_scores_nonnegative_and_deterministic(fitted_vae, pointmass_dataset_small):
    arrays = pointmass_dataset_small.to_arrays()
    obs, act = arrays["obs"][:500], arrays["act"][:500]
    s1 = fitted_vae.kl_score(obs, act)
    s2 = fitted_vae.kl_score(obs, act)
    assert np.all(s1 >= 0.0)
    np.testing.assert_array_equal(s1, s2)


def test_separation_in_distribution_vs_uniform(fitted_vae, pointmass_env):
    held_out = generate_dataset(pointmass_env, 0.5, 4000, seed=99)
    arrays = held_out.to_arrays()
    obs, act = arrays["obs"][:2000], arrays["act"][:2000]
    rand_act = rng_of(1).uniform(-1, 1, size=act.shape)
    in_scores = fitted_vae.kl_score(obs, act)
    out_scores = fitted_vae.kl_score(obs, rand_act)
    assert in_scores.mean() < out_scores.mean()
    labels = np.r_[np.zeros(len(in_scores)), np.ones(len(out_scores))]
    auc = roc_auc_score(labels, np.r_[in_scores, out_scores])
    assert auc >= 0.95


def test_calibrate_nearest_rank():
    class Stub:
        act_dim_ = 1
        obs_dim_ = 1

        def _arrays(self, data):
            return data

        def kl_score(self, obs, act):
            return np.asarray([1.0, 2.0, 3.0, 4.0])

    stub = Stub()
    data = (np.zeros((4, 1)), np.zeros((4, 1)))
    assert calibrate_threshold(stub, data, 50.0) == 2.0
    assert calibrate_threshold(stub, data, 100.0) == 4.0
    assert calibrate_threshold(stub, data, 75.0) == 3.0
    assert calibrate_threshold(stub, data, 1.0) == 1.0
    with pytest.raises(ValueError):
        calibrate_threshold(stub, data, 0.0)


def test_calibrate_permutation_invariant(fitted_vae, pointmass_dataset_small):
    arrays = pointmass_dataset_small.to_arrays()
    obs, act = arrays["obs"][:3000], arrays["act"][:3000]
    d1 = calibrate_threshold(fitted_vae, (obs, act), 75.0)
    perm = rng_of(2).permutation(len(obs))
    d2 = calibrate_threshold(fitted_vae, (obs[perm], act[perm]), 75.0)
    assert d1 == d2


def test_calibrate_monotone_in_percentile(fitted_vae, pointmass_dataset_small):
    arrays = pointmass_dataset_small.to_arrays()
    data = (arrays["obs"][:3000], arrays["act"][:3000])
    values = [calibrate_threshold(fitted_vae, data, p) for p in (50, 75, 99)]
    assert values[0] <= values[1] <= values[2]


def test_select_ood_actions_filter_semantics(fitted_vae):
    obs = np.zeros(4)
    rng = rng_of(3)
    candidates = rng.uniform(-1, 1, size=(10, 2))
    everything = select_ood_actions(fitted_vae, obs, candidates, threshold=0.0)
    np.testing.assert_array_equal(everything, candidates)
    nothing = select_ood_actions(fitted_vae, obs, candidates, threshold=np.inf)
    assert len(nothing) == 0


def test_select_ood_actions_threshold_and_order(fitted_vae):
    obs = np.zeros(4)
    candidates = rng_of(4).uniform(-1, 1, size=(50, 2))
    scores = fitted_vae.kl_score(np.tile(obs, (50, 1)), candidates)
    mid = float(np.median(scores))
    kept = select_ood_actions(fitted_vae, obs, candidates, threshold=mid)
    expected = candidates[scores >= mid]
    np.testing.assert_array_equal(kept, expected)


def test_select_monotone_in_threshold(fitted_vae):
    obs = np.zeros(4)
    candidates = rng_of(5).uniform(-1, 1, size=(30, 2))
    low = select_ood_actions(fitted_vae, obs, candidates, threshold=1e-6)
    high = select_ood_actions(fitted_vae, obs, candidates, threshold=1e-3)
    assert len(high) <= len(low)


def test_known_gaussian_behavior_calibration():
    # behavior policy is a known state-conditioned Gaussian; held-out actions
    # must fall below the 99th-percentile threshold at >= 95%
    rng = rng_of(6)

    def draw(n):
        obs = rng.uniform(-1, 1, size=(n, 3))
        act = np.tanh(0.7 * obs[:, :2] + 0.1 * rng.standard_normal((n, 2)))
        return obs, act

    train = draw(6000)
    model = BehaviorCVAE(hidden=32, steps=2500, batch_size=256, percentile=99.0,
                         random_state=0).fit(train)
    held_obs, held_act = draw(2000)
    below = model.kl_score(held_obs, held_act) < model.threshold_
    assert below.mean() >= 0.95


def test_model_round_trip(tmp_path, fitted_vae, pointmass_dataset_small):
    path = tmp_path / "vae.jsonl"
    save_model(fitted_vae, path)
    again = load_model(path)
    arrays = pointmass_dataset_small.to_arrays()
    obs, act = arrays["obs"][:100], arrays["act"][:100]
    np.testing.assert_array_equal(fitted_vae.kl_score(obs, act),
                                  again.kl_score(obs, act))
    assert again.threshold_ == fitted_vae.threshold_
    assert again.get_params() == fitted_vae.get_params()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        BehaviorCVAE(steps=1).fit((np.zeros((0, 2)), np.zeros((0, 1))))
