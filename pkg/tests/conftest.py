import math

import numpy as np
import pytest

from confoundnet import data as data_mod


@pytest.fixture(scope="session")
def tiny_synth_chips():
    """Small 3-class dataset shared by trainer/cli tests."""
    cfg = data_mod.SynthConfig(
        num_classes=3,
        image_size=16,
        train_per_class=12,
        test_per_class=6,
        noise_std=0.2,
        speckle_std=0.2,
        seed=99,
    )
    return data_mod.synth_generate(cfg), cfg.resolved_class_names()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
