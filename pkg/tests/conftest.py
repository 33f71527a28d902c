import numpy as np
import pytest

from chunkattn import EngineConfig, ModelConfig, build_model


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig.create(
        n_layers=2, n_heads=4, d_head=8, vocab_size=64, pretrain_length=512, seed=7
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture(scope="session")
def tiny_engine_config():
    return EngineConfig(chunk_size=32, num_selected=4, seed=11)


def random_tokens(n, vocab=64, seed=0):
    return np.random.default_rng([seed, n]).integers(0, vocab, size=n)
