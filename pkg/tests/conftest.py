import numpy as np
import pytest

from abpdcnet.model import ModelConfig

TOY = dict(input_shape=(8, 8, 8), stage_channels=(2, 2, 3, 3),
           stage_strides=((1, 1, 1), (2, 2, 2), (1, 1, 1), (1, 1, 1)),
           attn_dim=3, hidden=4, refine_channels=3, ncc_window=3)


@pytest.fixture
def toy_config():
    return ModelConfig(**TOY, zero_init_output=False)


@pytest.fixture
def toy_batch():
    rng = np.random.default_rng(11)
    return rng.normal(size=(2, 1, 8, 8, 8)), rng.normal(size=(2, 1, 8, 8, 8)), np.array([0, 1])
