import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pacloud.core import Box, ReconConfig
from pacloud.geometry import spherical_array


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_array():
    """8 sensors on a 30 mm sphere with a window around 20 us."""
    return spherical_array(8, 30.0, sound_speed=1.5, sample_rate=8.0,
                           n_samples=64, t_start=14.0)


@pytest.fixture
def tiny_config():
    return ReconConfig(
        lr_coords=1e-3, lr_pressure=5e-2, lr_std=1e-3, lr_deform=2e-3,
        static_iters=120, dynamic_iters=80, prune_every=30, n_basis=9,
        init_pitch=2.0, step_size=160, seed=7)


@pytest.fixture
def roi_box():
    return Box.cube(6.0)
