from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera (x right, y down, z forward)."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("camera dimensions must be positive")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("extrinsic rotation must be orthonormal")

    @classmethod
    def from_extrinsic(cls, E, fx, fy, cx, cy, width, height, near=0.01) -> "Camera":
        E = np.asarray(E, dtype=np.float64)
        return cls(E[:3, :3], E[:3, 3], fx, fy, cx, cy, int(width), int(height), near)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, fx, fy=None, width, height,
                cx=None, cy=None, near=0.01) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(R, -R @ eye, fx, fy if fy is not None else fx,
                   width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   int(width), int(height), near)

    @property
    def extrinsic(self) -> np.ndarray:
        E = np.eye(4)
        E[:3, :3] = self.rotation
        E[:3, 3] = self.translation
        return E

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy)


def project(means: np.ndarray, camera: Camera):
    """Pinhole projection.

    Returns ``(uv, depth, visible)``; points at or behind the near plane are
    flagged invisible and their ``uv`` is NaN.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    p = means @ camera.rotation.T + camera.translation
    z = p[:, 2]
    visible = z > camera.near
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([camera.fx * p[:, 0] / z + camera.cx, camera.fy * p[:, 1] / z + camera.cy], axis=1)
    uv[~visible] = np.nan
    return uv, z, visible


def projection_jacobian(p_cam: np.ndarray, camera: Camera) -> np.ndarray:
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    J = np.zeros((len(p_cam), 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / (z * z)
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / (z * z)
    return J


def project_covariance(cov: np.ndarray, means: np.ndarray, camera: Camera, dilation: float = 0.3) -> np.ndarray:
    """Screen-space covariance ``J W Sigma W^T J^T + dilation * I`` for visible Gaussians."""
    cov = np.asarray(cov, dtype=np.float64).reshape(-1, 3, 3)
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    p = means @ camera.rotation.T + camera.translation
    if np.any(p[:, 2] <= camera.near):
        raise ValueError("project_covariance requires every Gaussian in front of the near plane")
    J = projection_jacobian(p, camera)
    T = J @ camera.rotation
    return T @ cov @ np.swapaxes(T, 1, 2) + dilation * np.eye(2)
