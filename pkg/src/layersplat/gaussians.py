"""Gaussian attribute storage, covariance, radiance and adaptive density control."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._rotations import normalize_quats, quat_to_matrix
from .geometry import SkinningWeights

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)
MAX_SH_DEGREE = 3


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if sh_coeff_count(degree) != count or not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"{count} coefficients do not form a complete SH band set")
    return degree


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianSet:
    """Per-Gaussian attributes in canonical space.

    ``sh`` has shape (N, 3, C) with C = (L + 1)^2, channel-major. ``labels``
    holds one entity name per Gaussian.
    """

    means: np.ndarray
    quats: np.ndarray
    scales_raw: np.ndarray
    opacity_raw: np.ndarray
    sh: np.ndarray
    labels: np.ndarray
    weights: SkinningWeights | None = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.scales_raw = np.asarray(self.scales_raw, dtype=np.float64).reshape(n, 3)
        self.opacity_raw = np.asarray(self.opacity_raw, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 3 or self.sh.shape[:2] != (n, 3):
            raise ValueError(f"sh must be (N, 3, C), got {self.sh.shape}")
        sh_degree_from_count(self.sh.shape[2])
        labels = np.asarray(self.labels, dtype=str)
        if labels.ndim == 0:
            labels = np.full(n, str(labels))
        if labels.shape != (n,):
            raise ValueError("one label per Gaussian required")
        self.labels = labels
        if self.weights is not None and len(self.weights) != n:
            raise ValueError("skinning weights must cover every Gaussian")

    def __len__(self):
        return len(self.means)

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh.shape[2])

    @property
    def label(self) -> str:
        return str(self.labels[0]) if len(self.labels) else ""

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.scales_raw)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    def rotations(self) -> np.ndarray:
        return quat_to_matrix(self.quats)

    def covariances(self) -> np.ndarray:
        return covariance(self.quats, self.scales)

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.means.copy(), self.quats.copy(), self.scales_raw.copy(),
                           self.opacity_raw.copy(), self.sh.copy(), self.labels.copy(),
                           None if self.weights is None else self.weights.copy())

    def take(self, index) -> "GaussianSet":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.intp)
        return GaussianSet(self.means[index], self.quats[index], self.scales_raw[index],
                           self.opacity_raw[index], self.sh[index], self.labels[index],
                           None if self.weights is None else self.weights.take(index))

    def renormalize(self) -> None:
        self.quats = normalize_quats(self.quats)

    def param_arrays(self) -> dict:
        """Named views of the optimizable arrays."""
        params = {
            "means": self.means,
            "quats": self.quats,
            "scales_raw": self.scales_raw,
            "opacity_raw": self.opacity_raw,
            "sh": self.sh,
        }
        if self.weights is not None:
            params["delta_weights"] = self.weights.delta
        return params

    def with_labels(self, label: str) -> "GaussianSet":
        return replace(self.copy(), labels=np.full(len(self), label))


def concat_sets(sets) -> GaussianSet:
    sets = list(sets)
    weights = None
    if all(s.weights is not None for s in sets):
        weights = SkinningWeights(np.concatenate([s.weights.base for s in sets], axis=1),
                                  np.concatenate([s.weights.delta for s in sets], axis=1))
    return GaussianSet(
        np.concatenate([s.means for s in sets]),
        np.concatenate([s.quats for s in sets]),
        np.concatenate([s.scales_raw for s in sets]),
        np.concatenate([s.opacity_raw for s in sets]),
        np.concatenate([s.sh for s in sets]),
        np.concatenate([s.labels for s in sets]),
        weights,
    )


def covariance(q, s, check_unit: bool = True) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T for quaternions q (..., 4) and positive scales s (..., 3)."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if check_unit:
        norms = np.linalg.norm(q, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("covariance expects unit quaternions")
    M = quat_to_matrix(q) * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariance_from_rotation(R: np.ndarray, s: np.ndarray) -> np.ndarray:
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariance_backward(R: np.ndarray, s: np.ndarray, grad_cov: np.ndarray):
    """Gradients on (R, s) for ``covariance_from_rotation``; ``grad_cov`` need not be symmetric."""
    M = R * s[..., None, :]
    g_sym = grad_cov + np.swapaxes(grad_cov, -1, -2)
    g_M = g_sym @ M
    g_R = g_M * s[..., None, :]
    g_s = np.sum(g_M * R, axis=-2)
    return g_R, g_s


# --- spherical harmonics -------------------------------------------------


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape (N, (degree+1)^2), same sign convention as common splatting code."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    out = np.empty((n, sh_coeff_count(degree)))
    out[:, 0] = SH_C0
    if degree < 1:
        return out
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    out[:, 4] = SH_C2[0] * x * y
    out[:, 5] = SH_C2[1] * y * z
    out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * x * z
    out[:, 8] = SH_C2[4] * (xx - yy)
    if degree < 3:
        return out
    out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
    out[:, 10] = SH_C3[1] * x * y * z
    out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_backward(dirs: np.ndarray, degree: int, grad_basis: np.ndarray) -> np.ndarray:
    """Gradient on the query directions given a gradient on :func:`sh_basis`."""
    g = np.zeros_like(dirs, dtype=np.float64)
    if degree < 1:
        return g
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    b = grad_basis
    g[:, 1] -= SH_C1 * b[:, 1]
    g[:, 2] += SH_C1 * b[:, 2]
    g[:, 0] -= SH_C1 * b[:, 3]
    if degree < 2:
        return g
    xx, yy, zz = x * x, y * y, z * z
    c = SH_C2
    g[:, 0] += b[:, 4] * c[0] * y + b[:, 6] * c[2] * (-2 * x) + b[:, 7] * c[3] * z + b[:, 8] * c[4] * 2 * x
    g[:, 1] += b[:, 4] * c[0] * x + b[:, 5] * c[1] * z + b[:, 6] * c[2] * (-2 * y) + b[:, 8] * c[4] * (-2 * y)
    g[:, 2] += b[:, 5] * c[1] * y + b[:, 6] * c[2] * 4 * z + b[:, 7] * c[3] * x
    if degree < 3:
        return g
    c = SH_C3
    g[:, 0] += (b[:, 9] * c[0] * 6 * x * y + b[:, 10] * c[1] * y * z + b[:, 11] * c[2] * (-2 * x * y)
                + b[:, 12] * c[3] * (-6 * x * z) + b[:, 13] * c[4] * (4 * zz - 3 * xx - yy)
                + b[:, 14] * c[5] * 2 * x * z + b[:, 15] * c[6] * (3 * xx - 3 * yy))
    g[:, 1] += (b[:, 9] * c[0] * (3 * xx - 3 * yy) + b[:, 10] * c[1] * x * z
                + b[:, 11] * c[2] * (4 * zz - xx - 3 * yy) + b[:, 12] * c[3] * (-6 * y * z)
                + b[:, 13] * c[4] * (-2 * x * y) + b[:, 14] * c[5] * (-2 * y * z)
                + b[:, 15] * c[6] * (-6 * x * y))
    g[:, 2] += (b[:, 10] * c[1] * x * y + b[:, 11] * c[2] * 8 * y * z
                + b[:, 12] * c[3] * (6 * zz - 3 * xx - 3 * yy) + b[:, 13] * c[4] * 8 * x * z
                + b[:, 14] * c[5] * (xx - yy))
    return g


def radiance(f: np.ndarray, direction: np.ndarray, rotation: np.ndarray | None = None) -> np.ndarray:
    """RGB of one or many Gaussians seen along unit ``direction``.

    The direction is taken into the Gaussian's local frame with ``R^T d``;
    the SH expansion is offset by 0.5 and clamped at zero.
    """
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 2
    if single:
        f = f[None]
    d = np.broadcast_to(np.asarray(direction, dtype=np.float64).reshape(-1, 3), (len(f), 3))
    if rotation is not None:
        Rm = np.broadcast_to(np.asarray(rotation, dtype=np.float64).reshape(-1, 3, 3), (len(f), 3, 3))
        d = np.einsum("nji,nj->ni", Rm, d)
    basis = sh_basis(d, sh_degree_from_count(f.shape[2]))
    rgb = np.maximum(np.einsum("nck,nk->nc", f, basis) + 0.5, 0.0)
    return rgb[0] if single else rgb


def dc_from_rgb(rgb) -> np.ndarray:
    """DC coefficient that makes the view-independent colour equal ``rgb``."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# --- adaptive density control -------------------------------------------


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    min_opacity: float = 0.005
    split_factor: float = 1.6
    split_scale: float = 0.01
    max_gaussians: int | None = None


@dataclass
class GradAccumulator:
    """Running sums of per-view screen-space positional gradient norms."""

    total: np.ndarray = field(default_factory=lambda: np.zeros(0))
    count: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def zeros(cls, n: int) -> "GradAccumulator":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, norms: np.ndarray, visible: np.ndarray) -> None:
        self.total += np.where(visible, norms, 0.0)
        self.count += visible

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.total / np.maximum(self.count, 1), 0.0)

    def reset(self, n: int | None = None) -> None:
        n = len(self.total) if n is None else n
        self.total = np.zeros(n)
        self.count = np.zeros(n)


def densify_and_prune(gset: GaussianSet, accum: GradAccumulator, config: DensifyConfig | None = None,
                      rng: np.random.Generator | None = None):
    """Clone or split high-gradient Gaussians, then drop nearly transparent ones.

    Returns ``(new_set, origin)`` where ``origin[i]`` is the index of the
    surviving source Gaussian whose optimizer state the output Gaussian
    keeps, or -1 for newly created Gaussians. The accumulator is reset to the
    new size.
    """
    config = config or DensifyConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(gset)
    if len(accum.total) != n:
        raise ValueError("gradient accumulator does not match the set size")
    grads = accum.mean()
    hot = grads > config.grad_threshold
    big = gset.scales.max(axis=1) > config.split_scale
    if config.max_gaussians is not None:
        # clones and splits both add one Gaussian net; the largest gradients win the room left
        cand = np.flatnonzero(hot)
        cand = cand[np.argsort(-grads[cand], kind="stable")][:max(config.max_gaussians - n, 0)]
        hot = np.zeros(n, dtype=bool)
        hot[cand] = True
    clone_idx = np.flatnonzero(hot & ~big)
    split_idx = np.flatnonzero(hot & big)

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    parts = [gset.take(np.flatnonzero(keep))]
    origin = [np.flatnonzero(keep)]
    if len(clone_idx):
        parts.append(gset.take(clone_idx))
        origin.append(np.full(len(clone_idx), -1))
    if len(split_idx):
        parts.append(split_children(gset.take(split_idx), config.split_factor, rng))
        origin.append(np.full(2 * len(split_idx), -1))
    merged = concat_sets(parts)
    origin = np.concatenate(origin)

    alive = merged.opacity >= config.min_opacity
    if not np.any(alive):
        raise ValueError("densify_and_prune removed every Gaussian")
    result = merged.take(np.flatnonzero(alive))
    origin = origin[alive]
    accum.reset(len(result))
    return result, origin


def split_children(parents: GaussianSet, factor: float, rng: np.random.Generator) -> GaussianSet:
    """Two children per parent at 1/factor scale, centres drawn from the parent within 3 sigma."""
    m = len(parents)
    R = parents.rotations()
    s = parents.scales
    z = rng.standard_normal((2, m, 3))
    r = np.linalg.norm(z, axis=-1, keepdims=True)
    z = np.where(r > 3.0, z * (3.0 / r), z)
    offsets = np.einsum("nij,knj->kni", R, z * s[None])
    children = concat_sets([parents.copy(), parents.copy()])
    children.means = (parents.means[None] + offsets).reshape(-1, 3)
    children.scales_raw = children.scales_raw - np.log(factor)
    return children
