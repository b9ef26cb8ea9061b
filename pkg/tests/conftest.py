import pytest
import torch
from hypothesis import settings

from nextreid.data import generate_synthetic
from nextreid.encoders import EncoderConfig
from nextreid.model import NextConfig

torch.set_num_threads(1)
settings.register_profile("repo", deadline=None, max_examples=50)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def tiny_index():
    """4 train identities x 2 samples, 2 test identities."""
    return generate_synthetic(4, 2, (32, 16), seed=3, num_test_ids=2)


@pytest.fixture(scope="session")
def fixture8():
    return generate_synthetic(8, 4, (32, 16), seed=7)


@pytest.fixture
def small_cfg():
    return NextConfig(encoder=EncoderConfig(dim=32, heads=4, depth=1), num_semantic=2, num_structure=2)
