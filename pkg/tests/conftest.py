import numpy as np
import pytest

from cpqlab import generate_dataset, make_env


@pytest.fixture(scope="session")
def chain_env():
    return make_env("chain6")


@pytest.fixture(scope="session")
def chain_dataset(chain_env):
    """The 1e5-sample 50/50 chain mixture used by the exact-verification tests."""
    return generate_dataset(chain_env, 0.5, 100000, seed=7)


@pytest.fixture(scope="session")
def pointmass_env():
    return make_env("pointmass")


@pytest.fixture(scope="session")
def pointmass_dataset_small(pointmass_env):
    """A 2e4-sample point-mass mixture for unit-level training tests."""
    return generate_dataset(pointmass_env, 0.5, 20000, seed=3)


def rng_of(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.PCG64(seed))


@pytest.fixture
def rng():
    return rng_of(0)
