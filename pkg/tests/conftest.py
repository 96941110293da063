import numpy as np
import pytest

from data_handlers import gen_synthetic, train_test_split
from layers import build_model
from models import ModelConfig, NormSpec, TrainConfig


def mlp_config(widths=(8, 6), inputs=5, classes=3, norm='group', groups_rule='fixed'):
    return ModelConfig(architecture='mlp', widths=tuple(widths), num_classes=classes, input_shape=(inputs,),
                       norm=NormSpec(kind=norm, groups_rule=groups_rule))


def cnn_config(channels=(4, 8), shape=(2, 8, 8), classes=3, norm='group', groups_rule='per_channel'):
    return ModelConfig(architecture='small_cnn', channels=tuple(channels), num_classes=classes,
                       input_shape=tuple(shape), norm=NormSpec(kind=norm, groups_rule=groups_rule))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_mlp():
    return build_model(mlp_config(), seed=0)


@pytest.fixture
def small_cnn():
    return build_model(cnn_config(), seed=0)


@pytest.fixture
def cluster_data():
    data = gen_synthetic(3, (5,), 40, seed=1, separation=2.0)
    return train_test_split(data, 0.25, seed=1)


@pytest.fixture
def quick_train():
    return TrainConfig(epochs=2, batch_size=16, lr=0.05, warmup_epochs=1, seed=0)
