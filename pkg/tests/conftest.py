import numpy as np
import pytest
import torch

from repurpose_loc.data import SyntheticConfig, generate_synthetic

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """Six short videos with tiny feature dims, for fast model/train tests."""
    cfg = SyntheticConfig(num_videos=6, duration_range=(60, 120), feature_dims=(16, 24, 8), seed=3,
                          clip_duration_mean=30, clip_duration_std=5, cap_clips_to_topk=True)
    return generate_synthetic(cfg)
