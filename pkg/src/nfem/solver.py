"""Newton-Raphson solver with adaptive load stepping for the discrete residual."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elements import InvertedElement, element_energy_batch, element_forces_batch
from .materials import Material, NonPositiveJacobian
from .mesh import GridMesh


class FemError(Exception):
    """Base class for solver failures."""


class NonConverged(FemError):
    """Newton iteration failed to converge down to the minimum load increment."""


class SingularTangent(FemError):
    """Linear solve on the tangent failed (singular or non-finite factorization)."""


@dataclass
class NewtonOptions:
    tol_rel: float = 1e-8
    max_iterations: int = 20
    min_increment: float = 1.0 / 64.0
    force_substeps: int | None = None
    record_history: bool = False


@dataclass
class FemSolution:
    """Converged displacement vector with solver statistics."""

    u: np.ndarray
    f_ext: np.ndarray
    converged: bool
    newton_iterations: int
    load_steps: int
    residual_norm: float
    history: list = field(default_factory=list, repr=False)


def _gather_element_u(mesh: GridMesh, u: np.ndarray) -> np.ndarray:
    nodal = u.reshape(mesh.n_active, mesh.dim)
    return nodal[mesh.active_pos[mesh.connectivity]]


def assemble_system(
    mesh: GridMesh,
    u: np.ndarray,
    mat: Material,
    f_ext: np.ndarray | None = None,
    tangent: bool = True,
) -> tuple[np.ndarray, sp.csr_matrix | None]:
    """Global residual R = f_int(u) - f_ext and sparse tangent K = dR/du.

    Dirichlet rows/columns of K are replaced by identity and the matching
    residual entries are zeroed, so constrained DOFs stay exactly at zero.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.size != mesh.n_dof:
        raise ValueError(f"u must have {mesh.n_dof} entries, got {u.size}")
    r_e, K_e = element_forces_batch(mesh.element_coords, _gather_element_u(mesh, u), mat,
                                    tangent=tangent)
    R = np.bincount(mesh.element_dofs.reshape(-1), weights=r_e.reshape(-1),
                    minlength=mesh.n_dof)
    if f_ext is not None:
        R = R - f_ext
    fixed = mesh.dirichlet_dofs()
    R[fixed] = 0.0

    if not tangent:
        return R, None

    n_ed = mesh.element_dofs.shape[1]
    rows = np.repeat(mesh.element_dofs, n_ed, axis=1).reshape(-1)
    cols = np.tile(mesh.element_dofs, (1, n_ed)).reshape(-1)
    vals = K_e.reshape(-1)
    free = np.ones(mesh.n_dof, dtype=bool)
    free[fixed] = False
    keep = free[rows] & free[cols]
    rows = np.concatenate([rows[keep], fixed])
    cols = np.concatenate([cols[keep], fixed])
    vals = np.concatenate([vals[keep], np.ones(fixed.size)])
    K = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_dof, mesh.n_dof)).tocsr()
    return R, K


def total_potential(mesh: GridMesh, u: np.ndarray, mat: Material, f_ext: np.ndarray) -> float:
    """Total potential energy: integrated strain energy minus external work."""
    u = np.asarray(u, dtype=np.float64)
    W = element_energy_batch(mesh.element_coords, _gather_element_u(mesh, u), mat)
    return float(W.sum() - f_ext @ u)


def rest_tangent(mesh: GridMesh, mat: Material) -> sp.csr_matrix:
    """Tangent stiffness at u = 0 with Dirichlet rows/columns eliminated."""
    _, K0 = assemble_system(mesh, np.zeros(mesh.n_dof), mat)
    return K0


def _sparse_solve(K: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
    try:
        du = spla.spsolve(K.tocsc(), rhs)
    except RuntimeError as exc:  # umfpack/superlu singular factorization
        raise SingularTangent(str(exc)) from None
    if not np.all(np.isfinite(du)):
        raise SingularTangent("non-finite solution from sparse factorization")
    return du


def newton_solve(
    mesh: GridMesh,
    mat: Material,
    f_ext: np.ndarray,
    opts: NewtonOptions | None = None,
) -> FemSolution:
    """Solve f_int(u) = f_ext by Newton-Raphson with adaptive load stepping.

    The load is applied in increments of the total force vector, starting
    with a single full step. A step fails when Newton does not converge
    within ``max_iterations`` or an inadmissible state (det F <= 0) occurs;
    the increment is then halved down to ``min_increment``, and doubled
    again after two consecutive successful steps. ``force_substeps`` instead
    applies that many equal increments with no adaptation.

    Convergence is measured in the residual max-norm against
    ``tol_rel * max(1, |f_ext|_inf)`` for the total load.
    """
    opts = opts or NewtonOptions()
    f_ext = np.asarray(f_ext, dtype=np.float64)
    if f_ext.size != mesh.n_dof:
        raise ValueError(f"f_ext must have {mesh.n_dof} entries, got {f_ext.size}")
    if mesh.dirichlet_nodes.size == 0:
        raise ValueError("mesh has no Dirichlet nodes; rigid body modes unconstrained")
    if np.any(f_ext[mesh.dirichlet_dofs()] != 0.0):
        raise ValueError("f_ext must vanish on Dirichlet DOFs")

    tol = opts.tol_rel * max(1.0, float(np.max(np.abs(f_ext))) if f_ext.size else 1.0)
    history: list[np.ndarray] = []

    def newton_step(u0: np.ndarray, f_target: np.ndarray, record: bool):
        u = u0.copy()
        if record:
            history.clear()
            history.append(u.copy())
        for it in range(1, opts.max_iterations + 1):
            R, K = assemble_system(mesh, u, mat, f_ext=f_target)
            norm = float(np.max(np.abs(R))) if R.size else 0.0
            if norm <= tol:
                return u, it, norm
            du = _sparse_solve(K, -R)
            u = u + du
            if record:
                history.append(u.copy())
        raise NonConverged(f"no convergence in {opts.max_iterations} iterations")

    u = np.zeros(mesh.n_dof)
    total_iters = 0
    steps_done = 0
    residual = 0.0

    if opts.force_substeps is not None:
        n = int(opts.force_substeps)
        for k in range(1, n + 1):
            u, iters, residual = newton_step(u, (k / n) * f_ext, opts.record_history and k == n)
            total_iters += iters
            steps_done += 1
        return FemSolution(u, f_ext, True, total_iters, steps_done, residual,
                           history if opts.record_history else [])

    lam = 0.0
    dlam = 1.0
    consecutive = 0
    while lam < 1.0 - 1e-12:
        dlam = min(dlam, 1.0 - lam)
        target = lam + dlam
        try:
            u_new, iters, residual = newton_step(
                u, target * f_ext, opts.record_history and target >= 1.0 - 1e-12
            )
        except (NonConverged, InvertedElement, NonPositiveJacobian, SingularTangent) as exc:
            if isinstance(exc, SingularTangent) and steps_done == 0 and dlam >= 1.0:
                raise  # singular at the very first full-step solve: structural problem
            consecutive = 0
            dlam *= 0.5
            if dlam < opts.min_increment - 1e-15:
                raise NonConverged(
                    f"load increment fell below {opts.min_increment} of the total load"
                ) from exc
            continue
        u = u_new
        lam = target
        steps_done += 1
        total_iters += iters
        consecutive += 1
        if consecutive >= 2:
            dlam *= 2.0
            consecutive = 0
    return FemSolution(u, f_ext, True, total_iters, steps_done, residual,
                       history if opts.record_history else [])
