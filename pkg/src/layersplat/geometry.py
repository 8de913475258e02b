"""Skeleton kinematics and linear blend skinning of Gaussian sets.

A skeleton holds ``n_k`` joints. A pose carries ``n_k + 1`` axis-angle
rotations: entry 0 is the global orientation (applied about the root joint,
before the root's own rotation) and entry ``j + 1`` is the local rotation of
joint ``j``. Bone transforms map canonical space to observation space, one
per joint.

Skinning weights are stored joint-major, shape ``(n_k, N)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from ._rotations import axis_angle_to_matrix, polar_rotation, polar_rotation_backward, quat_to_matrix

if TYPE_CHECKING:
    from .gaussians import GaussianSet


class NonFiniteTransformError(ValueError):
    """Raised when blended per-Gaussian transforms contain NaN or inf."""

    def __init__(self, indices):
        self.indices = np.asarray(indices)
        shown = ", ".join(str(i) for i in self.indices[:10])
        more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
        super().__init__(f"non-finite blended transform for Gaussian(s) {shown}{more}")


def _rigid(R=None, t=None) -> np.ndarray:
    M = np.eye(4)
    if R is not None:
        M[:3, :3] = R
    if t is not None:
        M[:3, 3] = t
    return M


@dataclass(frozen=True)
class Skeleton:
    parents: np.ndarray
    rest_local: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        rest = np.asarray(self.rest_local, dtype=np.float64)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_local", rest)
        n = len(parents)
        if n < 1:
            raise ValueError("skeleton needs at least one joint")
        if rest.shape != (n, 4, 4):
            raise ValueError(f"rest_local must be ({n}, 4, 4), got {rest.shape}")
        if parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j in range(1, n):
            if not 0 <= parents[j] < j:
                raise ValueError(f"joint {j} has parent {parents[j]}; parents must precede children")
        dets = np.linalg.det(rest[:, :3, :3])
        ortho = np.einsum("nij,nkj->nik", rest[:, :3, :3], rest[:, :3, :3])
        if np.any(np.abs(dets - 1) > 1e-6) or np.any(np.abs(ortho - np.eye(3)) > 1e-6):
            raise ValueError("rest transforms must have proper orthonormal rotation blocks")
        if self.names and len(self.names) != n:
            raise ValueError("names must match joint count")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @classmethod
    def from_positions(cls, positions, parents, names=()):
        """Build a skeleton with identity rest rotations from global joint positions."""
        positions = np.asarray(positions, dtype=np.float64)
        parents = np.asarray(parents, dtype=np.int64)
        rest = np.tile(np.eye(4), (len(parents), 1, 1))
        for j, p in enumerate(parents):
            rest[j, :3, 3] = positions[j] - (positions[p] if p >= 0 else 0.0)
        return cls(parents, rest, tuple(names))

    def rest_global(self) -> np.ndarray:
        G = np.empty_like(self.rest_local)
        for j, p in enumerate(self.parents):
            G[j] = self.rest_local[j] if p < 0 else G[p] @ self.rest_local[j]
        return G

    def rest_joint_positions(self) -> np.ndarray:
        return self.rest_global()[:, :3, 3]

    def joint_positions(self, bones: np.ndarray) -> np.ndarray:
        """Posed joint positions: each bone applied to its rest joint location."""
        rest = self.rest_joint_positions()
        return np.einsum("kij,kj->ki", bones[:, :3, :3], rest) + bones[:, :3, 3]

    def same_topology(self, other: "Skeleton") -> bool:
        return self.n_joints == other.n_joints and np.array_equal(self.parents, other.parents)


@dataclass(frozen=True)
class Pose:
    root_translation: np.ndarray
    joint_rotations: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        r = np.asarray(self.joint_rotations, dtype=np.float64)
        if r.ndim != 2 or r.shape[1] != 3:
            raise ValueError("joint_rotations must have shape (n_k + 1, 3)")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(r))):
            raise ValueError("pose entries must be finite")
        # canonicalize angles into [0, 2*pi)
        ang = np.linalg.norm(r, axis=1)
        big = ang >= 2 * np.pi
        if np.any(big):
            r = r.copy()
            r[big] *= (np.mod(ang[big], 2 * np.pi) / ang[big])[:, None]
        object.__setattr__(self, "root_translation", t)
        object.__setattr__(self, "joint_rotations", r)

    @classmethod
    def rest(cls, n_joints: int) -> "Pose":
        return cls(np.zeros(3), np.zeros((n_joints + 1, 3)))

    @property
    def n_joints(self) -> int:
        return len(self.joint_rotations) - 1


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Bone transforms ``B_k = G_k(pose) @ inv(G_k(rest))``, shape (n_k, 4, 4)."""
    n = skeleton.n_joints
    if pose.n_joints != n:
        raise ValueError(f"pose has {pose.n_joints + 1} rotations, skeleton expects {n + 1}")
    rots = axis_angle_to_matrix(pose.joint_rotations)
    G = np.empty((n, 4, 4))
    for j, p in enumerate(skeleton.parents):
        if p < 0:
            G[j] = _rigid(t=pose.root_translation) @ skeleton.rest_local[j] @ _rigid(rots[0] @ rots[j + 1])
        else:
            G[j] = G[p] @ skeleton.rest_local[j] @ _rigid(rots[j + 1])
    rest_inv = np.linalg.inv(skeleton.rest_global())
    return G @ rest_inv


@dataclass
class SkinningWeights:
    base: np.ndarray
    delta: np.ndarray = None

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        if self.base.ndim != 2:
            raise ValueError("base weights must be (n_k, N)")
        if self.delta is None:
            self.delta = np.zeros_like(self.base)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.shape != self.base.shape:
            raise ValueError("delta weights must match base weights")

    @property
    def n_joints(self) -> int:
        return self.base.shape[0]

    def __len__(self):
        return self.base.shape[1]

    def effective(self) -> np.ndarray:
        # no renormalization: the learnable correction is a raw additive term
        return self.base + self.delta

    def is_partition_of_unity(self, atol=1e-9) -> bool:
        return bool(np.all(self.base >= -atol) and np.allclose(self.base.sum(0), 1.0, atol=atol))

    def take(self, index) -> "SkinningWeights":
        return SkinningWeights(self.base[:, index].copy(), self.delta[:, index].copy())

    def copy(self) -> "SkinningWeights":
        return SkinningWeights(self.base.copy(), self.delta.copy())


def effective_weights(weights: SkinningWeights, gaussian_index: int) -> np.ndarray:
    n = len(weights)
    if not -n <= gaussian_index < n:
        raise IndexError(f"Gaussian index {gaussian_index} out of range for {n} Gaussians")
    return weights.base[:, gaussian_index] + weights.delta[:, gaussian_index]


@dataclass
class DeformCache:
    means: np.ndarray
    rotations: np.ndarray
    bones: np.ndarray
    blend: np.ndarray
    polar: tuple
    cov_polar: np.ndarray


@dataclass
class DeformedGaussians:
    """Observation-space attributes of one Gaussian set.

    ``rotations`` is the blended linear part times the canonical rotation and
    is used as-is for the radiance direction. ``cov_rotations`` composes the
    canonical rotation with the polar rotation of the blended linear part and
    is what builds the covariance.
    """

    means: np.ndarray
    rotations: np.ndarray
    cov_rotations: np.ndarray
    scales_raw: np.ndarray
    opacity_raw: np.ndarray
    sh: np.ndarray
    labels: np.ndarray
    cache: DeformCache = field(repr=False, default=None)

    def __len__(self):
        return len(self.means)

    @property
    def label(self) -> str:
        return str(self.labels[0]) if len(self.labels) else ""


def blend_transforms(weights_eff_T: np.ndarray, bones: np.ndarray) -> np.ndarray:
    """Per-Gaussian blended transforms, weights given as (N, n_k)."""
    return np.einsum("nk,kij->nij", weights_eff_T, bones)


def deform_gaussians(gset: "GaussianSet", weights: SkinningWeights, bones: np.ndarray) -> DeformedGaussians:
    if len(weights) != len(gset):
        raise ValueError(f"weight matrix covers {len(weights)} Gaussians, set has {len(gset)}")
    if bones.shape != (weights.n_joints, 4, 4):
        raise ValueError(f"expected {weights.n_joints} bone transforms, got shape {bones.shape}")
    T = blend_transforms(weights.effective().T, bones)
    bad = np.flatnonzero(~np.all(np.isfinite(T), axis=(1, 2)))
    if len(bad):
        raise NonFiniteTransformError(bad)
    A = T[:, :3, :3]
    R = quat_to_matrix(gset.quats)
    means = np.einsum("nij,nj->ni", A, gset.means) + T[:, :3, 3]
    U, pcache = polar_rotation(A)
    cache = DeformCache(gset.means.copy(), R, bones, T, pcache, U)
    return DeformedGaussians(
        means=means,
        rotations=A @ R,
        cov_rotations=U @ R,
        scales_raw=gset.scales_raw,
        opacity_raw=gset.opacity_raw,
        sh=gset.sh,
        labels=gset.labels,
        cache=cache,
    )


def deform_backward(cache: DeformCache, grad_means, grad_rotations=None, grad_cov_rotations=None):
    """Chain upstream gradients through the blend.

    Returns ``(grad_mu, grad_R, grad_delta)`` with ``grad_R`` on the canonical
    rotation matrices (N, 3, 3) and ``grad_delta`` joint-major (n_k, N).
    """
    if cache is None:
        raise RuntimeError("deform_backward needs the cache from a forward deform_gaussians call")
    A = cache.blend[:, :3, :3]
    grad_means = np.asarray(grad_means, dtype=np.float64)
    N = len(grad_means)
    g_mu = np.einsum("nji,nj->ni", A, grad_means)
    g_A = np.einsum("ni,nj->nij", grad_means, cache.means)
    g_R = np.zeros((N, 3, 3))
    if grad_rotations is not None:
        g_A += grad_rotations @ np.swapaxes(cache.rotations, 1, 2)
        g_R += np.swapaxes(A, 1, 2) @ grad_rotations
    if grad_cov_rotations is not None:
        U = cache.cov_polar
        g_U = grad_cov_rotations @ np.swapaxes(cache.rotations, 1, 2)
        g_R += np.swapaxes(U, 1, 2) @ grad_cov_rotations
        g_A += polar_rotation_backward(cache.polar, g_U)
    g_T = np.zeros((N, 4, 4))
    g_T[:, :3, :3] = g_A
    g_T[:, :3, 3] = grad_means
    g_delta = np.einsum("nij,kij->kn", g_T, cache.bones)
    return g_mu, g_R, g_delta
