"""SO(3) primitives: hat map, exponential, logarithm, orthogonal projection.

Rotations are stored as plain 3x3 numpy arrays throughout the package.
Near-zero rotation angles switch to 4th-order Taylor expansions to avoid
the 0/0 in the sin(theta)/theta coefficients.
"""

from __future__ import annotations

import numpy as np

from .errors import AngleNearPiError, ProjectionFailedError

# below this angle the closed-form Rodrigues coefficients lose accuracy
_SMALL_ANGLE = 1e-6


def hat(w) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: hat(w) @ b == cross(w, b)."""
    wx, wy, wz = w
    return np.array([
        [0.0, -wz, wy],
        [wz, 0.0, -wx],
        [-wy, wx, 0.0],
    ])


def so3_exp(w) -> np.ndarray:
    """Rotation matrix for the rotation vector ``w`` (Rodrigues formula)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < _SMALL_ANGLE:
        # 4th-order Taylor in theta: sin(t)/t and (1-cos t)/t^2
        a = 1.0 - theta**2 / 6.0 + theta**4 / 120.0
        b = 0.5 - theta**2 / 24.0 + theta**4 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R) -> np.ndarray:
    """Rotation vector of R; inverse of so3_exp for angles in [0, pi).

    Raises AngleNearPiError when the rotation angle is too close to pi
    (trace(R) <= -1 + 1e-9), where the axis is not numerically recoverable
    from the antisymmetric part.
    """
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr <= -1.0 + 1e-9:
        raise AngleNearPiError(f"rotation angle too close to pi (trace = {tr:.12g})")
    c = min(1.0, max(-1.0, (tr - 1.0) / 2.0))
    theta = np.arccos(c)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        # v = sin(theta)/theta * w; invert the coefficient by Taylor series
        return v * (1.0 + theta**2 / 6.0 + 7.0 * theta**4 / 360.0)
    return v * (theta / np.sin(theta))


def project_so3(M) -> np.ndarray:
    """Nearest rotation to M in Frobenius norm (orthogonal polar factor).

    Idempotent on valid rotations and invariant to positive scaling.
    Requires det(M) > 0; a singular or reflected input raises
    ProjectionFailedError.
    """
    M = np.asarray(M, dtype=float)
    U, s, Vt = np.linalg.svd(M)
    if s[-1] <= 1e-12 * max(s[0], 1.0):
        raise ProjectionFailedError(f"matrix is numerically singular (singular values {s})")
    R = U @ Vt
    if np.linalg.det(R) < 0:
        if np.linalg.det(M) <= 0:
            raise ProjectionFailedError("matrix has non-positive determinant")
        U[:, -1] *= -1.0
        R = U @ Vt
    return R


def is_rotation(R, tol: float = 1e-9) -> bool:
    """Orthogonality and determinant check used by the type invariants."""
    R = np.asarray(R)
    if R.shape != (3, 3):
        return False
    return (
        np.linalg.norm(R.T @ R - np.eye(3)) <= tol
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def rotation_distance(Ra, Rb) -> float:
    """Geodesic distance in radians between two rotations."""
    return float(np.linalg.norm(so3_log(np.asarray(Ra).T @ np.asarray(Rb))))
