"""FEM-driven force/displacement data generation and U-Net surrogate training."""

from .materials import (
    DeformationState,
    Material,
    NonPositiveJacobian,
    lame_from_E_nu,
    pk1_stress,
    strain_energy,
)
from .mesh import GridMesh, beam2d_mesh, beam3d_mesh, lshape2d_mesh
from .solver import (
    FemError,
    FemSolution,
    NewtonOptions,
    NonConverged,
    SingularTangent,
    assemble_system,
    newton_solve,
    rest_tangent,
)

__all__ = [
    "DeformationState",
    "Material",
    "NonPositiveJacobian",
    "lame_from_E_nu",
    "pk1_stress",
    "strain_energy",
    "GridMesh",
    "beam2d_mesh",
    "beam3d_mesh",
    "lshape2d_mesh",
    "FemError",
    "FemSolution",
    "NewtonOptions",
    "NonConverged",
    "SingularTangent",
    "assemble_system",
    "newton_solve",
    "rest_tangent",
]
