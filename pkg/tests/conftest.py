"""Shared fixtures for unit and e2e tests."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.core.complex import build_cartesian_complex  # noqa: E402


@pytest.fixture
def grid3():
    """3 x 3 unit-square complex."""
    return build_cartesian_complex(3, 3)


@pytest.fixture
def grid6():
    """6 x 6 unit-square complex."""
    return build_cartesian_complex(6, 6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full training runs on the desk-scale grid (deselect with -m 'not slow')")
