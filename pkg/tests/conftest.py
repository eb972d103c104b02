import numpy as np
import pytest

from headfem.geometry import (
    Compartment,
    Segmentation,
    SurfaceMesh,
    box_surface,
    icosphere,
)

# Regular tetrahedron: the smallest closed surface.
TET_NODES = np.array([
    [1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
])
# Outward-oriented faces.
TET_TRIS = np.array([
    [0, 1, 2],
    [0, 3, 1],
    [0, 2, 3],
    [1, 3, 2],
])


@pytest.fixture
def tet_surface():
    return SurfaceMesh(TET_NODES, TET_TRIS, name="tet")


@pytest.fixture
def cube_surface():
    return box_surface(name="cube")


@pytest.fixture
def unit_cube_segmentation():
    return Segmentation([
        Compartment(box_surface(name="cube"), conductivity=1.0, priority=0,
                    active=True),
    ])


@pytest.fixture
def nested_sphere_segmentation():
    inner = icosphere(radius=0.5, subdivisions=2, name="inner")
    outer = icosphere(radius=1.0, subdivisions=2, name="outer")
    return Segmentation([
        Compartment(inner, conductivity=0.33, priority=0, active=True),
        Compartment(outer, conductivity=0.43, priority=0),
    ])
