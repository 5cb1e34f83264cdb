"""Shared fixtures: tiny configurations and synthetic datasets."""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from synthetic import synthetic_dataset, write_toy_dataset  # noqa: E402

from fewshot_heads.losses import ExtractorTap, LossWeights  # noqa: E402
from fewshot_heads.networks import NetworkConfig  # noqa: E402


def tiny_network_config(**overrides) -> NetworkConfig:
    """32px / 4-video config: big enough to exercise attention, small enough to train fast."""
    base = dict(
        resolution=32,
        min_channels=8,
        max_channels=32,
        embedding_dim=16,
        num_videos=4,
        n_down_blocks=2,
        n_bottleneck_blocks=1,
        n_up_blocks=2,
        self_attention_resolutions=(8,),
    )
    base.update(overrides)
    return NetworkConfig(**base)


def gradcheck_network_config(**overrides) -> NetworkConfig:
    """16px / N=8 double-precision gradient-check configuration."""
    base = dict(
        resolution=16,
        min_channels=4,
        max_channels=8,
        embedding_dim=8,
        num_videos=3,
        n_down_blocks=2,
        n_bottleneck_blocks=1,
        n_up_blocks=2,
        self_attention_resolutions=(8,),
    )
    base.update(overrides)
    return NetworkConfig(**base)


def fast_loss_weights() -> LossWeights:
    return LossWeights(
        fm_weight=10.0,
        mch_weight=10.0,
        content=(
            ExtractorTap("identity", (0,), 1.0),
            ExtractorTap("random_pyramid", (0, 1), 0.15),
        ),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    """4 identities x 10 frames at 32px, in memory."""
    return synthetic_dataset(n_identities=4, frames_per_video=10, resolution=32, seed=11)


@pytest.fixture
def desk_dataset():
    """4 identities x 12 frames at the desk default 64px."""
    return synthetic_dataset(n_identities=4, frames_per_video=12, resolution=64, seed=5)


@pytest.fixture
def toy_root(tmp_path):
    """3 identities x 8 frames on disk in the CLI layout."""
    return write_toy_dataset(tmp_path / "toyset", n_identities=3, frames_per_video=8, resolution=32, seed=3)


@pytest.fixture(autouse=True)
def _seeded_torch():
    torch.manual_seed(0)
    yield
