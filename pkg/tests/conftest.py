"""
Shared fixtures
"""

from fractions import Fraction

import numpy as np
import pytest

from services.engine.tensor import Tensor
from services.network.config import ModelConfig
from services.synthetic_service import SyntheticService


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest width plan that still satisfies every group-norm rule"""
    return ModelConfig(channel_scale=Fraction(1, 16), seed=0)


@pytest.fixture
def toy_config():
    return ModelConfig(channel_scale=Fraction(1, 8), seed=0)


@pytest.fixture
def image_batch(rng):
    def make(batch=1, channels=3, height=32, width=32):
        return Tensor(rng.uniform(0.0, 1.0, (batch, channels, height, width)))
    return make


@pytest.fixture
def isolated_dataset(tmp_path):
    root = tmp_path / 'isolated'
    SyntheticService(mode='vehicle').make_synthetic(root, 4, min_points=20, max_points=30,
                                                    regime='isolated', seed=3)
    return root


@pytest.fixture
def scale_dataset(tmp_path):
    root = tmp_path / 'scale'
    SyntheticService(mode='vehicle').make_synthetic(root, 4, min_points=20, max_points=30,
                                                    regime='scale-var', seed=5)
    return root
