"""Minimal SO(3) helpers for the 6-dof camera pose parameterization.

Poses are stored as (R, T) with R a world->camera rotation matrix. Local
updates use a right perturbation on the rotation, R <- R @ exp(hat(dr)),
and a plain additive update on T.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(w) @ v == cross(w, v)."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation matrix for a rotation vector."""
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        # second-order series keeps FD Jacobian checks clean near zero
        return np.eye(3) + K + 0.5 * (K @ K)
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * K + B * (K @ K)


def log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix (inverse of exp)."""
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-6:
        # near pi the off-diagonal formula degenerates; use the symmetric part
        S = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(S), 0.0))
        # fix signs from the off-diagonal entries
        if axis[0] > _EPS:
            axis[1] = np.copysign(axis[1], S[0, 1])
            axis[2] = np.copysign(axis[2], S[0, 2])
        elif axis[1] > _EPS:
            axis[2] = np.copysign(axis[2], S[1, 2])
        axis /= max(np.linalg.norm(axis), _EPS)
        return theta * axis
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * (theta / np.sin(theta))


def right_jacobian_inv(w: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3), d log(exp(w) exp(dw)) / d dw at 0."""
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + (1.0 / 12.0) * (K @ K)
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    """Orthonormal with determinant +1 within tol."""
    if R.shape != (3, 3):
        return False
    return (
        np.abs(R @ R.T - np.eye(3)).max() <= tol
        and abs(np.linalg.det(R) - 1.0) <= tol
    )
