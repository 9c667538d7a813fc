import os
import sys

import numpy as np
import pytest
import torch
from torch import nn

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from general.models import ContextSpec, ModelDims, SyntheticSpec  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run trend-level experiments marked slow")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trend-level experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_dims() -> ModelDims:
    return ModelDims(channels=2, length=16, latent=4, text_dim=8, hidden=4, num_classes=3,
                     conv_channels=(3, 4), kernel=3, stride=2, decoder_hidden=6,
                     context_hidden=5, controller_hidden=3)


@pytest.fixture
def tiny_spec() -> SyntheticSpec:
    contexts = [
        ContextSpec(name="left_pocket", description="Left pocket", shift=0.10, noise=0.05),
        ContextSpec(name="right_pocket", description="Right pocket", shift=0.15, noise=0.05),
        ContextSpec(name="upper_arm", description="Upper arm", shift=0.20, noise=0.05),
        ContextSpec(name="wrist", description="Wrist", shift=0.50, noise=0.05),
        ContextSpec(name="belt", description="Belt", shift=0.90, noise=0.05),
    ]
    return SyntheticSpec(num_classes=3, channels=2, length=16, contexts=contexts, samples_per_cell=8, seed=3)


@pytest.fixture
def smooth_init():
    """Small weights and positive biases: every ReLU stays in its linear region."""
    def init(module: nn.Module, seed: int = 0) -> nn.Module:
        gen = np.random.default_rng(seed)
        with torch.no_grad():
            for layer in module.modules():
                if isinstance(layer, (nn.Linear, nn.Conv1d)):
                    layer.weight.copy_(torch.as_tensor(gen.uniform(-0.02, 0.02, tuple(layer.weight.shape))))
                    layer.bias.copy_(torch.as_tensor(gen.uniform(1.0, 1.5, tuple(layer.bias.shape))))
        return module
    return init
