import numpy as np
import pytest
import torch

from scenestyle import synthetic
from scenestyle.config import Config
from scenestyle.features import TestExtractor


def small_config(**overrides) -> Config:
    """Test-backend config sized for tiny fixtures."""
    base = dict(
        backend="test", texture_resolution=32, texture_levels=2, pyramid_heights=[32, 48],
        theta_min=16.0, theta_d=1.0, epochs=1, frame_repeats=2, lr=0.01, lr_decay=1.0,
        lr_decay_every=1000, style_min_size=32, min_part_positions=1, lambda_style=1.0,
        lambda_content=1.0, lambda_reg=1.0,
    )
    base.update(overrides)
    return Config(**base)


@pytest.fixture
def quad_scene():
    return synthetic.quad_scene(32, 32, texture_resolution=32)


@pytest.fixture(scope="session")
def extractor64():
    return TestExtractor(seed=0, dtype=torch.float64)


@pytest.fixture(scope="session")
def extractor32():
    return TestExtractor(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
