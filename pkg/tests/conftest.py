import numpy as np
import pytest

from cpat.models import ModelDims, build_embedding_table, init_model_params
from cpat.numerics import rng_new

TINY_DIMS = ModelDims(vocab_size=6, embed_dim=4, latent_dim=3, hidden_dim=5,
                      gen_hidden_dim=5, dropout_rate=0.0)


@pytest.fixture
def tiny_dims():
    return TINY_DIMS


@pytest.fixture
def tiny_table():
    return build_embedding_table(rng_new(101).split("table"), TINY_DIMS.vocab_size, TINY_DIMS.embed_dim)


@pytest.fixture
def tiny_params():
    return init_model_params(rng_new(102).split("params"), TINY_DIMS)


@pytest.fixture
def tiny_batch():
    return [np.array([0, 2, 4, 1, 5]), np.array([3, 5, 1]), np.array([2, 2, 0, 4])]
