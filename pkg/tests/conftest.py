import numpy as np
import pytest
from hypothesis import settings

from dslp.transformer import ModelConfig, init_params

settings.register_profile("dslp", max_examples=40, deadline=None)
settings.load_profile("dslp")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """2+2 layers, d=16: small enough for finite-difference checks."""
    return ModelConfig(vocab_size=12, num_encoder_layers=2, num_decoder_layers=2, model_dim=16,
                       ffn_dim=32, num_heads=2, max_len=12)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=3)


def perturb_params(params, rng, scale=0.3):
    """Push zero-initialised biases and unit gains off their special values."""
    for name, t in params.tensors.items():
        if t.data.ndim == 1:
            t.data += rng.normal(0.0, scale, size=t.shape)
    return params
