"""Rotation-group utilities: skew maps, attitude errors, and the exponential map.

Conventions: rotation matrices are body-to-world, angular velocities are
expressed in the body frame, and `Rdot = R @ hat(omega)`.
"""
from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8
_ORTHO_TOL = 1e-9


def hat(v: np.ndarray) -> np.ndarray:
    """Map a 3-vector to the skew-symmetric matrix with hat(v) @ w = v x w."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Inverse of hat; S must be skew-symmetric within tol."""
    if np.max(np.abs(S + S.T)) > tol:
        raise ValueError("matrix is not skew-symmetric")
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def hat_rows(p: np.ndarray) -> np.ndarray:
    """Skew matrices for an array of 3-vectors: (..., 3) -> (..., 3, 3)."""
    out = np.zeros(p.shape[:-1] + (3, 3))
    out[..., 0, 1] = -p[..., 2]
    out[..., 0, 2] = p[..., 1]
    out[..., 1, 0] = p[..., 2]
    out[..., 1, 2] = -p[..., 0]
    out[..., 2, 0] = -p[..., 1]
    out[..., 2, 1] = p[..., 0]
    return out


def exp_so3(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula for the rotation about axis v/|v| by angle |v|."""
    theta = np.linalg.norm(v)
    V = hat(v)
    if theta < _SMALL_ANGLE:
        # second-order Taylor; exact to machine precision at this scale
        return np.eye(3) + V + 0.5 * (V @ V)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * V + b * (V @ V)


def rot_x(angle: float) -> np.ndarray:
    """Rotation about the x axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    """Rotation about the y axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    """Rotation about the z axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def attitude_error(R: np.ndarray, Rd: np.ndarray) -> np.ndarray:
    """Vector attitude error 0.5 * vee(Rd^T R - R^T Rd)."""
    A = Rd.T @ R
    S = 0.5 * (A - A.T)
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def angular_velocity_error(
    R: np.ndarray, Rd: np.ndarray, omega: np.ndarray, omega_d: np.ndarray
) -> np.ndarray:
    """Body-frame angular velocity error omega - R^T Rd omega_d."""
    return omega - R.T @ Rd @ omega_d


def attitude_cost(R: np.ndarray, Rd: np.ndarray) -> float:
    """Configuration error 0.5 * tr(I - Rd^T R), in [0, 2]."""
    return 0.5 * (3.0 - np.trace(Rd.T @ R))


def error_transport_matrix(R: np.ndarray, Rd: np.ndarray) -> np.ndarray:
    """Matrix E with d/dt attitude_error = E @ angular-velocity error."""
    A = R.T @ Rd
    return 0.5 * (np.trace(A) * np.eye(3) - A)


def orthonormality_residual(R: np.ndarray) -> float:
    """Frobenius norm of R^T R - I."""
    return float(np.linalg.norm(R.T @ R - np.eye(3)))


def project_so3(R: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def reorthonormalize(R: np.ndarray, tol: float = _ORTHO_TOL) -> np.ndarray:
    """Project back onto SO(3) only when drift exceeds tol."""
    if orthonormality_residual(R) > tol:
        return project_so3(R)
    return R
