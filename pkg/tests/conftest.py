import numpy as np
import pytest

from cache_utils import clear_cache
from schemas import LabeledSet, TrainConfig, UnlabeledSet
from services.gmm_data import isotropic_spec, sample_labeled, sample_test_set, sample_unlabeled


@pytest.fixture(autouse=True)
def _fresh_baseline_cache():
    clear_cache()
    yield
    clear_cache()


@pytest.fixture
def iso_spec():
    return isotropic_spec(d=5, mean_norm=2.0, sigma=1.0, seed=7)


@pytest.fixture
def small_labeled(iso_spec) -> LabeledSet:
    return sample_labeled(iso_spec, 40, rng_seed=1)


@pytest.fixture
def small_unlabeled(iso_spec) -> UnlabeledSet:
    return sample_unlabeled(iso_spec, 200, rng_seed=2)


@pytest.fixture
def small_test(iso_spec) -> LabeledSet:
    return sample_test_set(iso_spec, 2000, rng_seed=3)


@pytest.fixture
def fast_config() -> TrainConfig:
    return TrainConfig(
        epochs=20,
        learning_rate=0.1,
        optimizer="sgd",
        robust={"gamma": 0.5, "gamma_prime": 0.1, "lambda": 1.0},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
