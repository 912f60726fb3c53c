import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpqlab import generate_dataset, make_env, scripted_policy
from cpqlab.baselines import (
    NaiveDualActorCritic,
    SafeBehaviorCloning,
    gaussian_nll_graph,
    mmd_squared,
)
from cpqlab import nn
from cpqlab.harness import estimator_policy, evaluate_policy

from conftest import rng_of
from helpers import directional_fd_check


# --- behavior cloning -------------------------------------------------------

def test_bc_requires_safe_samples(pointmass_env):
    unsafe_only = generate_dataset(pointmass_env, 0.0, 2000, seed=0)
    with pytest.raises(ValueError, match="safe"):
        SafeBehaviorCloning(steps=10).fit(unsafe_only)


def test_bc_recovers_deterministic_controller(pointmass_dataset_small, pointmass_env):
    bc = SafeBehaviorCloning(steps=2500, hidden=(32, 32),
                             random_state=0).fit(pointmass_dataset_small)
    safe = pointmass_dataset_small.filter_source("safe")
    arrays = safe.to_arrays(pointmass_env)
    predicted = bc.predict(arrays["obs"][:2000])
    mse = float(np.mean((predicted - arrays["act"][:2000]) ** 2))
    assert mse <= 1e-3


def test_bc_cost_below_unsafe_controller(pointmass_dataset_small, pointmass_env):
    bc = SafeBehaviorCloning(steps=2500, hidden=(32, 32),
                             random_state=0).fit(pointmass_dataset_small)
    gamma = pointmass_env.gamma
    bc_report = evaluate_policy(pointmass_env, estimator_policy(bc, pointmass_env),
                                episodes=10, gamma=gamma, rng=rng_of(1), limit=10.0)
    unsafe_report = evaluate_policy(pointmass_env,
                                    scripted_policy(pointmass_env, "unsafe"),
                                    episodes=10, gamma=gamma, rng=rng_of(1),
                                    limit=10.0)
    assert bc_report.cost_mean <= unsafe_report.cost_mean


def test_bc_never_sees_unsafe_samples(pointmass_dataset_small):
    seen = []
    SafeBehaviorCloning(steps=30, hidden=(8, 8), random_state=0).fit(
        pointmass_dataset_small, batch_hook=lambda sources: seen.append(sources))
    assert len(seen) == 30
    assert all((batch == "safe").all() for batch in seen)


def test_bc_is_deterministic(pointmass_dataset_small):
    a = SafeBehaviorCloning(steps=40, hidden=(8, 8), random_state=9).fit(
        pointmass_dataset_small)
    b = SafeBehaviorCloning(steps=40, hidden=(8, 8), random_state=9).fit(
        pointmass_dataset_small)
    for wa, wb in zip(a.actor_.flat(), b.actor_.flat()):
        np.testing.assert_array_equal(wa, wb)


def test_bc_nll_gradients_match_finite_differences(rng):
    actor = nn.init_mlp([3, 8, 4], rng)
    obs = rng.standard_normal((10, 3))
    presquash = rng.standard_normal((10, 2))

    def build(leaves):
        return gaussian_nll_graph(leaves, obs, presquash)

    directional_fd_check(build, actor.flat(), rng, n_points=15)


# --- maximum mean discrepancy --------------------------------------------------

def test_mmd_zero_for_identical_samples(rng):
    x = rng.standard_normal((40, 2))
    assert mmd_squared(x, x.copy()) == pytest.approx(0.0, abs=1e-12)


def test_mmd_symmetric(rng):
    x = rng.standard_normal((30, 2))
    y = rng.standard_normal((25, 2)) + 0.5
    assert mmd_squared(x, y) == pytest.approx(mmd_squared(y, x), rel=1e-12)


def test_mmd_detects_shift(rng):
    x = rng.standard_normal((100, 2))
    near = rng.standard_normal((100, 2))
    far = rng.standard_normal((100, 2)) + 3.0
    assert mmd_squared(x, far, bandwidth=2.0) > mmd_squared(x, near, bandwidth=2.0)


@settings(deadline=None, max_examples=20, derandomize=True)
@given(seed=st.integers(0, 50), shift=st.floats(0.0, 2.0))
def test_mmd_nonnegative(seed, shift):
    gen = np.random.default_rng(seed)
    x = gen.standard_normal((20, 2))
    y = gen.standard_normal((20, 2)) + shift
    assert mmd_squared(x, y) >= 0.0


# --- the naive dual baseline ------------------------------------------------------

def test_naive_fixed_zero_multipliers_is_unconstrained(pointmass_dataset_small):
    agent = NaiveDualActorCritic(limit=10.0, steps=50, actor_hidden=(8, 8),
                                 critic_hidden=(8, 8), lambda1_init=0.0,
                                 lambda2_init=0.0, learn_multipliers=False,
                                 random_state=0)
    agent.fit(pointmass_dataset_small)
    assert agent.lambda1_ == 0.0 and agent.lambda2_ == 0.0
    assert all(np.isfinite(row["actor_loss"]) for row in agent.metrics_)


def test_naive_multipliers_stay_nonnegative(pointmass_dataset_small):
    agent = NaiveDualActorCritic(limit=10.0, steps=80, actor_hidden=(8, 8),
                                 critic_hidden=(8, 8), lambda_lr=0.05,
                                 random_state=0)
    agent.fit(pointmass_dataset_small)
    for row in agent.metrics_:
        assert row["lambda1"] >= 0.0 and row["lambda2"] >= 0.0
        assert np.isfinite(row["lambda1"]) and np.isfinite(row["lambda2"])


def test_divergence_pressure_shrinks_mmd(pointmass_dataset_small):
    # fixed multipliers, increasing leash weight: the final policy's sampled
    # action distribution must move monotonically closer to the data actions
    from cpqlab.cpq import sample_actions

    arrays = pointmass_dataset_small.to_arrays()
    obs, act = arrays["obs"][:512], arrays["act"][:512]
    finals = []
    for lam2 in (0.0, 5.0, 50.0):
        agent = NaiveDualActorCritic(limit=10.0, steps=400, actor_hidden=(16, 16),
                                     critic_hidden=(16, 16), actor_lr=3e-3,
                                     lambda1_init=0.0, lambda2_init=lam2,
                                     learn_multipliers=False, random_state=1)
        agent.fit(pointmass_dataset_small)
        sampled = sample_actions(agent.actor_, obs, rng_of(7), n=1)[:, 0, :]
        finals.append(mmd_squared(sampled, act, bandwidth=1.0))
    assert finals[2] < finals[1] < finals[0]


def test_naive_is_deterministic(pointmass_dataset_small):
    def run():
        return NaiveDualActorCritic(limit=10.0, steps=30, actor_hidden=(8, 8),
                                    critic_hidden=(8, 8), random_state=4).fit(
            pointmass_dataset_small)

    a, b = run(), run()
    assert a.metrics_ == b.metrics_
    for wa, wb in zip(a.actor_.flat(), b.actor_.flat()):
        np.testing.assert_array_equal(wa, wb)
