import pytest

from refval import (LrSchedule, ModelSpec, RngState, TrainConfig,
                    synth_gaussian_blobs)


@pytest.fixture
def small_blobs():
    """100 samples, 2 well-separated classes in 5 dims."""
    return synth_gaussian_blobs(RngState(7).derive(0), 50, 2, 5, 3.0)


@pytest.fixture
def small_config():
    return TrainConfig(total_steps=30, batch_size=10,
                       schedule=LrSchedule(0.5), rng=RngState(1))


@pytest.fixture
def logistic_spec(small_blobs):
    return ModelSpec((small_blobs.n_features, small_blobs.n_classes))


def rand_vec(g, n, scale=1.0):
    return scale * (2.0 * g.random(n) - 1.0)
