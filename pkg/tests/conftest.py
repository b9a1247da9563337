import numpy as np
import pytest

from iseg.autodiff import Tensor
from iseg.model import ModelConfig, expected_shapes, init_weights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def generic_weights(config, seed, scale=0.25, bias_scale=0.05):
    """Weights at a generic point for gradient checks: the production init
    (sigma 0.02, zero biases) sits near a saddle where most gradients drop
    below finite-difference noise."""
    gen = np.random.default_rng(seed)
    out = {}
    for name, shape in sorted(expected_shapes(config).items()):
        if name.endswith("gamma"):
            data = 1.0 + gen.normal(0.0, bias_scale, shape)
        elif name.endswith(("bias", "beta")):
            data = gen.normal(0.0, bias_scale, shape)
        else:
            data = gen.normal(0.0, scale, shape)
        out[name] = Tensor(data, requires_grad=True)
    return out


# 16x16-input two-stage config, small enough for exhaustive gradient checks
TINY_CONFIG = ModelConfig(
    in_channels=3, patch_size=2, embed_dim=4, depths=(1, 1), heads=(1, 2),
    window_size=2, mlp_ratio=2, decoder_dim=6, input_h=16, input_w=16,
    click_radius=2,
)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY_CONFIG


@pytest.fixture
def tiny_weights(tiny_config):
    return init_weights(tiny_config, seed=7)
