"""
Shared pytest fixtures
"""

import os
import sys

import numpy as np
import pytest
from dotenv import load_dotenv

# Add current directory to Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

# Load environment variables
load_dotenv()

from atmosphere import CHANNEL_ONE, ChannelConfig


@pytest.fixture
def channel_one() -> ChannelConfig:
    return CHANNEL_ONE


@pytest.fixture
def short_channel() -> ChannelConfig:
    """A 1 km link with a compact beam, cheap to propagate on small grids."""
    return ChannelConfig(
        satellite_altitude_H=1_000.0,
        ground_altitude_h0=0.0,
        beam_waist_w0=0.05,
        receiver_radius_Rr=0.1,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def vacuum_dataset(tmp_path_factory):
    """Ten samples of a turbulence-free channel one on a reduced grid."""
    from dataset import run_campaign

    out = tmp_path_factory.mktemp("vacuum")
    manifest = run_campaign(CHANNEL_ONE, 10, 0, 7, out, grid_n=128, grid_side=8.0, sample_n=32)
    return out, manifest
