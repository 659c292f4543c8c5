import numpy as np
import pytest

from nfem.materials import Material
from nfem.mesh import beam2d_mesh, beam3d_mesh, lshape2d_mesh


@pytest.fixture(scope="session")
def mat():
    return Material.from_E_nu(500.0, 0.4)


@pytest.fixture(scope="session")
def beam2d_small():
    """Small cantilever used across solver tests (8x3 nodes, 48 DOF)."""
    return beam2d_mesh(node_counts=(8, 3), lengths=(4.0, 1.0))


@pytest.fixture(scope="session")
def beam2d_paper():
    """Desk-scale benchmark geometry (16x4 nodes, 128 DOF)."""
    return beam2d_mesh(node_counts=(16, 4), lengths=(4.0, 1.0))


@pytest.fixture(scope="session")
def beam3d_small():
    return beam3d_mesh(node_counts=(5, 3, 3), lengths=(2.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def lshape_mesh():
    return lshape2d_mesh()


def random_admissible_F(rng, dim, scale=0.3, min_det=0.2):
    """Random deformation gradient with det F comfortably positive."""
    while True:
        F = np.eye(dim) + scale * rng.standard_normal((dim, dim))
        if np.linalg.det(F) > min_det:
            return F
