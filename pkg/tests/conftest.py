import warnings

import numpy as np
import pytest

from dgeeg.hexmesh import build_hex_mesh, compute_skeleton
from dgeeg.schemes import ConductivityField
from dgeeg.voxelgeom import LabelGrid, four_layer_table, generate_sphere_segmentation


@pytest.fixture(scope="session")
def table():
    return four_layer_table()


@pytest.fixture(scope="session")
def sphere4(table):
    """seg-4-h-4 four-layer sphere: (grid, mesh, skeleton, cond)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        grid = generate_sphere_segmentation(table, 4.0)
    mesh = build_hex_mesh(grid)
    sk = compute_skeleton(mesh)
    return grid, mesh, sk, ConductivityField.from_table(mesh, table)


@pytest.fixture(scope="session")
def sphere8(table):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        grid = generate_sphere_segmentation(table, 8.0)
    mesh = build_hex_mesh(grid)
    sk = compute_skeleton(mesh)
    return grid, mesh, sk, ConductivityField.from_table(mesh, table)


def block_mesh(labels, h=1.0):
    """Mesh of an explicit label block (0 = air)."""
    grid = LabelGrid(np.asarray(labels), h)
    mesh = build_hex_mesh(grid)
    return mesh, compute_skeleton(mesh)
