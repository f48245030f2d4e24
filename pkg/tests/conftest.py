"""Shared fixtures: the toy gradient-check model and cached benchmark runs.

The expensive artifacts (feature datasets, 40-epoch training runs) are
session-scoped so the acceptance criteria that share them don't repeat
the work.
"""

import numpy as np
import pytest

from monofuse import cnn, synth, trainer

BENCHMARK_SEED = 7
BENCHMARK_LEARNING_RATE = 3e-3  # raised from 1e-4; see the training-rate note in README
TOY_SEED = 3
TOY_LEARNING_RATE = 1e-3  # raised from 1e-4 for the toy overfit run


def make_toy_model(seed: int = 0) -> cnn.CnnModel:
    """3-class model for 12x12 inputs exercising every layer type."""
    rng = np.random.default_rng(seed)
    layers = [
        cnn.make_conv(rng, 1, 8, (3, 3)),
        cnn.Relu(),
        cnn.Lrn(),
        cnn.MaxPool(),
        cnn.make_conv(rng, 8, 8, (3, 3)),
        cnn.Relu(),
        cnn.Flatten(),
        cnn.make_dense(rng, 8 * 3 * 3, 3),
        cnn.Softmax(),
    ]
    return cnn.CnnModel(
        layers=layers, input_shape=(1, 12, 12), num_classes=3, seed=seed
    )


@pytest.fixture
def toy_model():
    return make_toy_model(0)


@pytest.fixture(scope="session")
def toy_dataset():
    return synth.make_toy_overfit(seed=TOY_SEED)


@pytest.fixture(scope="session")
def benchmark_raw():
    return synth.make_benchmark(seed=BENCHMARK_SEED)


@pytest.fixture(scope="session")
def benchmark_features(benchmark_raw):
    """All four spectrum datasets, derived from one decomposition pass."""
    train_raw, test_raw = benchmark_raw
    cfg = trainer.TrainConfig(feature_kind="fusion", epochs=1)
    kinds = ["amplitude", "phase", "orientation", "fusion"]
    return (
        trainer.build_feature_datasets(train_raw, cfg, kinds),
        trainer.build_feature_datasets(test_raw, cfg, kinds),
    )
