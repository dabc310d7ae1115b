"""Shared fixtures: a quickly-calibrated toy world for structural tests."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vfcodec.config import ExperimentConfig
from vfcodec.world import create_world


@pytest.fixture(scope="session")
def shared_world():
    """Small calibration budget: enough structure for unit tests, fast to build."""
    cfg = ExperimentConfig.toy(calib_steps=40, calib_sequences=2)
    return cfg, create_world(cfg)
