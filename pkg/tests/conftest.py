import numpy as np
import pytest

from orewatch_spectral import HyperspectralCube, WavelengthGrid
from orewatch_synth import SceneSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return WavelengthGrid.linspace(400.0, 970.0, 40)


@pytest.fixture
def sensor_grid():
    return WavelengthGrid.linspace(400.0, 970.0, 220)


@pytest.fixture
def small_cube(small_grid, rng):
    data = rng.uniform(0.05, 0.6, size=(6, 8, len(small_grid)))
    return HyperspectralCube(data, small_grid)


@pytest.fixture
def tiny_scene_spec():
    return SceneSpec(height=24, width=32, seed=5)
