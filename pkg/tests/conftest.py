import numpy as np
import pytest

from tactwin.geometry import (
    SensorGeometry,
    SurfaceProfile,
    build_mesh,
    build_skeleton,
    skeleton_distance_field,
)


@pytest.fixture(scope="session")
def geometry():
    return SensorGeometry()


@pytest.fixture(scope="session")
def profile(geometry):
    return SurfaceProfile(geometry)


@pytest.fixture(scope="session")
def lattice(geometry):
    return build_skeleton(geometry, 8, 2)


@pytest.fixture(scope="session")
def mesh_2mm(geometry, lattice):
    return build_mesh(geometry, target_spacing=2.0, seed=0, lattice=lattice)


@pytest.fixture(scope="session")
def mesh_1mm(geometry, lattice):
    return build_mesh(geometry, target_spacing=1.0, seed=0, lattice=lattice)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
