"""Isoparametric Q4/H8 elements: shape functions, quadrature, forces, tangents."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .materials import DeformationState, Material, NonPositiveJacobian, pk1, pk1_tangent

_G = 1.0 / np.sqrt(3.0)


class InvertedElement(ValueError):
    """Isoparametric map with non-positive Jacobian (degenerate geometry)."""


@lru_cache(maxsize=None)
def reference_corners(dim: int) -> np.ndarray:
    """Corner coordinates of the reference element in {-1, +1}^dim.

    Ordering matches the mesh connectivity: x fastest, counterclockwise
    bottom face first for hexes.
    """
    if dim == 2:
        return np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64)
    if dim == 3:
        quad = [[-1, -1], [1, -1], [1, 1], [-1, 1]]
        return np.array(
            [[x, y, -1] for x, y in quad] + [[x, y, 1] for x, y in quad],
            dtype=np.float64,
        )
    raise ValueError(f"unsupported dimension {dim}")


@lru_cache(maxsize=None)
def gauss_points(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """2-point Gauss rule per axis: (points (q, dim), weights (q,))."""
    pts = reference_corners(dim) * _G
    return pts, np.ones(len(pts))


def shape_functions(dim: int, points: np.ndarray) -> np.ndarray:
    """Multilinear shape function values N (q, n_en) at reference points."""
    corners = reference_corners(dim)
    points = np.atleast_2d(points)
    # N_a(xi) = prod_k (1 + c_ak xi_k) / 2^dim
    return np.prod(1.0 + corners[None, :, :] * points[:, None, :], axis=2) / 2.0**dim


def shape_gradients(dim: int, points: np.ndarray) -> np.ndarray:
    """Shape function gradients dN/dxi (q, n_en, dim) at reference points."""
    corners = reference_corners(dim)
    points = np.atleast_2d(points)
    terms = 1.0 + corners[None, :, :] * points[:, None, :]  # (q, a, k)
    grads = np.empty((points.shape[0], corners.shape[0], dim))
    for j in range(dim):
        others = np.prod(np.delete(terms, j, axis=2), axis=2)
        grads[:, :, j] = corners[None, :, j] * others / 2.0**dim
    return grads


def _geometry(coords: np.ndarray, dN_dxi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Physical shape gradients and Jacobian determinants, batched.

    coords: (E, a, d), dN_dxi: (q, a, d) -> dN_dx (E, q, a, d), detJ (E, q).
    """
    jac = np.einsum("eai,qaj->eqij", coords, dN_dxi)
    detJ = np.linalg.det(jac)
    if np.any(detJ <= 0.0):
        raise InvertedElement("non-positive Jacobian of the isoparametric map")
    jinv = np.linalg.inv(jac)
    dN_dx = np.einsum("qaj,eqjk->eqak", dN_dxi, jinv)
    return dN_dx, detJ


def deformation_state(
    element_coords: np.ndarray, element_u: np.ndarray, quadrature_point: np.ndarray
) -> DeformationState:
    """Deformation gradient F = I + grad(u) at one reference point of an element."""
    coords = np.asarray(element_coords, dtype=np.float64)
    u = np.asarray(element_u, dtype=np.float64)
    dim = coords.shape[1]
    dN_dxi = shape_gradients(dim, np.asarray(quadrature_point, dtype=np.float64))
    dN_dx, _ = _geometry(coords[None], dN_dxi)
    grad_u = np.einsum("ai,ak->ik", u, dN_dx[0, 0])
    return DeformationState.from_F(np.eye(dim) + grad_u)


def element_forces_batch(
    coords: np.ndarray, u: np.ndarray, mat: Material, tangent: bool = True
) -> tuple[np.ndarray, np.ndarray | None]:
    """Internal force vectors and consistent tangents for a batch of elements.

    coords, u: (E, n_en, d). Returns r (E, n_en*d) with node-major DOF order
    and K (E, n_en*d, n_en*d) when requested. Gauss quadrature with 2 points
    per axis throughout.
    """
    coords = np.asarray(coords, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    E, n_en, d = coords.shape
    qp, w = gauss_points(d)
    dN_dxi = shape_gradients(d, qp)
    dN_dx, detJ = _geometry(coords, dN_dxi)
    wdet = w[None, :] * detJ  # (E, q)

    grad_u = np.einsum("eai,eqak->eqik", u, dN_dx)
    F = grad_u + np.eye(d)
    J = np.linalg.det(F)
    if np.any(J <= 0.0):
        raise NonPositiveJacobian("det F <= 0 inside an element")

    P = pk1(F, mat)
    r = np.einsum("eqiK,eqaK,eq->eai", P, dN_dx, wdet, optimize=True)
    r = r.reshape(E, n_en * d)
    if not tangent:
        return r, None

    A = pk1_tangent(F, mat)
    K = np.einsum("eq,eqaJ,eqiJkL,eqbL->eaibk", wdet, dN_dx, A, dN_dx, optimize=True)
    return r, K.reshape(E, n_en * d, n_en * d)


def element_forces(
    element_coords: np.ndarray, element_u: np.ndarray, mat: Material
) -> tuple[np.ndarray, np.ndarray]:
    """Internal force sub-vector and tangent sub-matrix for a single element."""
    r, K = element_forces_batch(
        np.asarray(element_coords, dtype=np.float64)[None],
        np.asarray(element_u, dtype=np.float64)[None],
        mat,
    )
    return r[0], K[0]


def element_energy_batch(coords: np.ndarray, u: np.ndarray, mat: Material) -> np.ndarray:
    """Integrated strain energy per element, batched: (E,)."""
    from .materials import energy_density

    coords = np.asarray(coords, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    d = coords.shape[2]
    qp, w = gauss_points(d)
    dN_dxi = shape_gradients(d, qp)
    dN_dx, detJ = _geometry(coords, dN_dxi)
    grad_u = np.einsum("eai,eqak->eqik", u, dN_dx)
    F = grad_u + np.eye(d)
    W = energy_density(F, mat)
    return np.einsum("eq,eq->e", w[None, :] * detJ, W)
