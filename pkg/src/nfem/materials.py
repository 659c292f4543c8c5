"""Compressible Neo-Hookean constitutive law: energy density, stress, tangent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonPositiveJacobian(ValueError):
    """Deformation gradient with det F <= 0 (inadmissible state)."""


def lame_from_E_nu(E: float, nu: float) -> tuple[float, float]:
    """Lame parameters (lambda, mu) from Young's modulus and Poisson's ratio.

    Valid for E > 0 and 0 <= nu < 0.5; the incompressible limit nu = 0.5
    is rejected because lambda diverges there.
    """
    if E <= 0.0:
        raise ValueError(f"Young's modulus must be positive, got E={E}")
    if not 0.0 <= nu < 0.5:
        raise ValueError(f"Poisson's ratio must lie in [0, 0.5), got nu={nu}")
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


@dataclass(frozen=True)
class Material:
    """Isotropic Neo-Hookean material parameterized by (E, nu, lam, mu) in Pa."""

    E: float
    nu: float
    lam: float
    mu: float

    def __post_init__(self):
        lam, mu = lame_from_E_nu(self.E, self.nu)
        if not (np.isclose(lam, self.lam) and np.isclose(mu, self.mu)):
            raise ValueError("Lame parameters inconsistent with (E, nu)")

    @classmethod
    def from_E_nu(cls, E: float, nu: float) -> "Material":
        lam, mu = lame_from_E_nu(E, nu)
        return cls(E=E, nu=nu, lam=lam, mu=mu)


@dataclass(frozen=True)
class DeformationState:
    """Deformation gradient with its invariants J = det F and Ic = tr(F^T F).

    For 2D problems (plane strain) ``F`` stores the in-plane 2x2 block of the
    full gradient diag(F, 1); J and Ic follow the 3x3 embedding, so the rest
    state always has J = 1 and Ic = 3 regardless of dimension.
    """

    F: np.ndarray
    J: float
    Ic: float

    @classmethod
    def from_F(cls, F: np.ndarray) -> "DeformationState":
        F = np.asarray(F, dtype=np.float64)
        J, Ic = invariants(F)
        if J <= 0.0:
            raise NonPositiveJacobian(f"det F = {J} <= 0")
        return cls(F=F, J=float(J), Ic=float(Ic))


def invariants(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """J = det F and Ic = tr(F^T F) for a (..., d, d) array of gradients.

    The trace invariant counts the out-of-plane unit stretch for d = 2.
    """
    d = F.shape[-1]
    J = np.linalg.det(F)
    Ic = np.einsum("...ij,...ij->...", F, F) + (3 - d)
    return J, Ic


def energy_density(F: np.ndarray, mat: Material) -> np.ndarray:
    """Neo-Hookean strain energy W per unit reference volume, batched over F.

    W = mu/2 (Ic - 3 - 2 ln J) + lam/4 (J^2 - 1 - 2 ln J); zero at F = I and
    for any rigid rotation.
    """
    J, Ic = invariants(F)
    if np.any(J <= 0.0):
        raise NonPositiveJacobian("det F <= 0 encountered in energy evaluation")
    lnJ = np.log(J)
    return 0.5 * mat.mu * (Ic - 3.0 - 2.0 * lnJ) + 0.25 * mat.lam * (J**2 - 1.0 - 2.0 * lnJ)


def pk1(F: np.ndarray, mat: Material) -> np.ndarray:
    """First Piola-Kirchhoff stress P = dW/dF, batched over (..., d, d)."""
    J, _ = invariants(F)
    if np.any(J <= 0.0):
        raise NonPositiveJacobian("det F <= 0 encountered in stress evaluation")
    FinvT = np.swapaxes(np.linalg.inv(F), -1, -2)
    return mat.mu * (F - FinvT) + 0.5 * mat.lam * (J[..., None, None] ** 2 - 1.0) * FinvT


def pk1_tangent(F: np.ndarray, mat: Material) -> np.ndarray:
    """Material tangent A_iJkL = dP_iJ/dF_kL, batched over (..., d, d).

    Closed form obtained by differentiating pk1; validated against finite
    differences in the test suite.
    """
    d = F.shape[-1]
    J, _ = invariants(F)
    if np.any(J <= 0.0):
        raise NonPositiveJacobian("det F <= 0 encountered in tangent evaluation")
    FinvT = np.swapaxes(np.linalg.inv(F), -1, -2)
    I = np.eye(d)
    batch = F.shape[:-2]
    A = np.zeros(batch + (d, d, d, d), dtype=np.float64)
    # mu * delta_ik delta_JL
    A += mat.mu * np.einsum("ik,JL->iJkL", I, I)
    # (mu - lam/2 (J^2 - 1)) * FinvT_iL FinvT_kJ
    coef = mat.mu - 0.5 * mat.lam * (J**2 - 1.0)
    A += coef[..., None, None, None, None] * np.einsum("...iL,...kJ->...iJkL", FinvT, FinvT)
    # lam J^2 * FinvT_iJ FinvT_kL
    A += (mat.lam * J**2)[..., None, None, None, None] * np.einsum(
        "...iJ,...kL->...iJkL", FinvT, FinvT
    )
    return A


def strain_energy(state: DeformationState, mat: Material) -> float:
    """Strain energy density for one deformation state."""
    return float(energy_density(state.F, mat))


def pk1_stress(state: DeformationState, mat: Material) -> np.ndarray:
    """First Piola-Kirchhoff stress for one deformation state."""
    return pk1(state.F, mat)
