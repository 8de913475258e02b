"""Rotation helpers shared by the deformation and splatting code.

Quaternions are stored (w, x, y, z). Every forward map that takes part in
optimization has a matching ``*_backward`` that maps an upstream gradient on
the output back to the input.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy.spatial.transform import Rotation


def axis_angle_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues map for one or many axis-angle vectors."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    return Rotation.from_rotvec(rotvec.reshape(-1, 3)).as_matrix().reshape(rotvec.shape[:-1] + (3, 3))


def normalize_quats(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _unit_quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices of (possibly unnormalized) quaternions, shape (..., 3, 3)."""
    return _unit_quat_to_matrix(normalize_quats(np.asarray(q, dtype=np.float64)))


def quat_to_matrix_backward(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Gradient on the raw quaternion given a gradient on ``quat_to_matrix(q)``.

    The normalization step is differentiated too, so the result is tangent to
    the unit sphere at ``q / |q|`` and scaled by ``1 / |q|``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    g = grad_R
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    gu = np.stack([gw, gx, gy, gz], axis=-1)
    return (gu - u * np.sum(u * gu, axis=-1, keepdims=True)) / norm


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternions with non-negative w."""
    R = np.asarray(R, dtype=np.float64)
    xyzw = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_quat()
    q = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    q[q[:, 0] < 0] *= -1
    return q.reshape(R.shape[:-2] + (4,))


@njit(cache=True)
def _polar_newton(A, tol, max_iter):
    n = A.shape[0]
    U = np.empty_like(A)
    ok = np.ones(n, dtype=np.bool_)
    X = np.empty((3, 3))
    C = np.empty((3, 3))
    for k in range(n):
        for r in range(3):
            for c in range(3):
                X[r, c] = A[k, r, c]
        for it in range(max_iter):
            # cofactor matrix C, so that inv(X)^T = C / det
            C[0, 0] = X[1, 1] * X[2, 2] - X[1, 2] * X[2, 1]
            C[0, 1] = X[1, 2] * X[2, 0] - X[1, 0] * X[2, 2]
            C[0, 2] = X[1, 0] * X[2, 1] - X[1, 1] * X[2, 0]
            C[1, 0] = X[0, 2] * X[2, 1] - X[0, 1] * X[2, 2]
            C[1, 1] = X[0, 0] * X[2, 2] - X[0, 2] * X[2, 0]
            C[1, 2] = X[0, 1] * X[2, 0] - X[0, 0] * X[2, 1]
            C[2, 0] = X[0, 1] * X[1, 2] - X[0, 2] * X[1, 1]
            C[2, 1] = X[0, 2] * X[1, 0] - X[0, 0] * X[1, 2]
            C[2, 2] = X[0, 0] * X[1, 1] - X[0, 1] * X[1, 0]
            det = X[0, 0] * C[0, 0] + X[0, 1] * C[0, 1] + X[0, 2] * C[0, 2]
            if not det > 0.0:
                ok[k] = False
                break
            nx = 0.0
            nc = 0.0
            for r in range(3):
                for c in range(3):
                    nx += X[r, c] * X[r, c]
                    nc += C[r, c] * C[r, c]
            # Frobenius-norm scaling speeds up the early iterations
            gamma = math.sqrt(math.sqrt(nc / (det * det) / nx))
            diff = 0.0
            for r in range(3):
                for c in range(3):
                    y = 0.5 * (gamma * X[r, c] + C[r, c] / (gamma * det))
                    d = abs(y - X[r, c])
                    if d > diff:
                        diff = d
                    X[r, c] = y
            if diff < tol:
                break
        for r in range(3):
            for c in range(3):
                U[k, r, c] = X[r, c]
    return U, ok


def polar_rotation(A: np.ndarray):
    """Rotation factor U of the polar decomposition A = U P for a batch (N, 3, 3).

    Returns ``(U, cache)``; the cache feeds :func:`polar_rotation_backward`.
    Matrices with det A <= 0 go through an SVD where the reflection is folded
    into the smallest singular value, so U is always a proper rotation.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    U, ok = _polar_newton(A, 1e-15, 30)
    if not np.all(ok):
        bad = ~ok
        X, sig, Vh = np.linalg.svd(A[bad])
        flip = np.linalg.det(X) * np.linalg.det(Vh) < 0
        X[flip, :, 2] *= -1
        U[bad] = X @ Vh
    P = np.swapaxes(U, 1, 2) @ A
    P = 0.5 * (P + np.swapaxes(P, 1, 2))
    return U, (U, P)


def _vex(S):
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def _hat(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def polar_rotation_backward(cache, grad_U: np.ndarray) -> np.ndarray:
    """dL/dA = U [y]x with (tr(P) I - P) y = vex(U^T G - G^T U)."""
    U, P = cache
    M = np.swapaxes(U, 1, 2) @ grad_U
    m = _vex(M - np.swapaxes(M, 1, 2))
    H = np.trace(P, axis1=1, axis2=2)[:, None, None] * np.eye(3) - P
    y = np.linalg.solve(H, m[..., None])[..., 0]
    return U @ _hat(y)
