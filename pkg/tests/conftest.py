import numpy as np
import pytest

from macc import simulator


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small 16x16 dataset, enough for shape/contract tests."""
    return simulator.generate_dataset(48, 16, seed=123, image_size=16)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
