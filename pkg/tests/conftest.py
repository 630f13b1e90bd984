"""
Shared fixtures: the companion automorphism, a linear and a small DA map, and reduced-size fields
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.core.da_family import BumpSpec, compute_frames, make_da_map  # noqa: E402
from src.core.plaques import PlaqueBuilder, linear_partition  # noqa: E402
from src.core.semiconjugacy import solve_h  # noqa: E402
from src.core.torus_linalg import COMPANION_MATRIX, analyze_matrix  # noqa: E402

SMALL_S = 0.02


@pytest.fixture(scope="session")
def spectral():
    return analyze_matrix(COMPANION_MATRIX)


@pytest.fixture(scope="session")
def bump():
    return BumpSpec()


@pytest.fixture(scope="session")
def linear_map(spectral, bump):
    return make_da_map(spectral, bump, 0.0)


@pytest.fixture(scope="session")
def small_map(spectral, bump):
    return make_da_map(spectral, bump, SMALL_S, power=1, check_grid=16)


@pytest.fixture(scope="session")
def linear_u(linear_map):
    return solve_h(linear_map, grid_n=8)


@pytest.fixture(scope="session")
def small_u(small_map):
    return solve_h(small_map, grid_n=16, depth=60, test_n=5)


@pytest.fixture(scope="session")
def linear_frames(linear_map):
    return compute_frames(linear_map, grid_n=4, iters=5)


@pytest.fixture(scope="session")
def small_frames(small_map):
    return compute_frames(small_map, grid_n=8, iters=120, tolerance=1e-4)


@pytest.fixture(scope="session")
def linear_builder(linear_map, linear_u, linear_frames, spectral):
    return PlaqueBuilder(linear_map, linear_u, linear_frames, linear_partition(spectral, 2), step=0.05)


@pytest.fixture(scope="session")
def small_builder(small_map, small_u, small_frames, spectral):
    return PlaqueBuilder(small_map, small_u, small_frames, linear_partition(spectral, 2), step=0.05)
