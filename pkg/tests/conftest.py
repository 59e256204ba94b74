"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from spintrack.core import PhysicsParams
from spintrack.simharness import make_court_cameras


@pytest.fixture(scope="session")
def params() -> PhysicsParams:
    return PhysicsParams()


@pytest.fixture(scope="session")
def cameras():
    return make_court_cameras()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
