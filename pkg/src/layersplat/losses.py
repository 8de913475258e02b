"""Training objectives. Each loss returns its value together with analytic gradients."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    """Loss-stack weights and internals; every default is a declared choice, not a published value."""

    mask: float = 0.1
    s3im: float = 0.2
    gaussian_reg: float = 0.01
    iso: float = 0.1
    collision: float = 1.0
    iso_mu: float = 1.0
    iso_sigma: float = 0.1
    reg_weights: float = 0.01
    reg_scale: float = 0.01
    collision_margin: float = 0.0
    collision_radius: float | None = None
    patch_size: int = 64
    ssim_kernel: int = 11
    ssim_stride: int = 1
    s3im_repeats: int = 10
    knn: int = 5

    def __post_init__(self):
        for name in ("mask", "s3im", "gaussian_reg", "iso", "collision", "iso_mu", "iso_sigma",
                     "reg_weights", "reg_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.ssim_kernel > self.patch_size:
            raise ValueError("SSIM kernel cannot exceed the S3IM patch size")
        if self.s3im_repeats < 1 or self.knn < 1 or self.ssim_stride < 1:
            raise ValueError("s3im_repeats, knn and ssim_stride must be >= 1")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**data)


def recon_l1(rendered, target):
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image sizes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def mask_loss(alpha_maps, masks):
    """Mean L1 between per-entity accumulated alpha and binary masks, averaged over entities."""
    alpha_maps = np.asarray(alpha_maps, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if alpha_maps.shape != masks.shape:
        raise ValueError(f"alpha/mask sizes differ: {alpha_maps.shape} vs {masks.shape}")
    diff = alpha_maps - masks
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


# --- SSIM ------------------------------------------------------------------


@lru_cache(maxsize=64)
def _filter_matrix(n: int, size: int, sigma: float, stride: int) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    starts = np.arange(0, n - size + 1, stride)
    M = np.zeros((len(starts), n))
    for r, s in enumerate(starts):
        M[r, s:s + size] = g
    M.flags.writeable = False
    return M


def _as_chw(img):
    img = np.asarray(img, dtype=np.float64)
    return img[None] if img.ndim == 2 else np.moveaxis(img, -1, 0)


def _filt(Gh, Gw, X):
    return Gh @ X @ Gw.T


def _filt_adjoint(Gh, Gw, Y):
    return Gh.T @ Y @ Gw


def _ssim_terms(a, b, kernel, sigma, stride):
    H, W = a.shape[1:]
    if min(H, W) < kernel:
        raise ValueError(f"image {H}x{W} smaller than the {kernel}px SSIM window")
    Gh = _filter_matrix(H, kernel, sigma, stride)
    Gw = _filter_matrix(W, kernel, sigma, stride)
    mu_a, mu_b = _filt(Gh, Gw, a), _filt(Gh, Gw, b)
    e_aa, e_bb, e_ab = _filt(Gh, Gw, a * a), _filt(Gh, Gw, b * b), _filt(Gh, Gw, a * b)
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * (e_ab - mu_a * mu_b) + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    return S, (Gh, Gw, mu_a, mu_b, A1, A2, B1, B2)


def ssim(image_a, image_b, kernel_size: int = 11, sigma: float = 1.5, stride: int = 1) -> float:
    """Mean structural similarity over valid Gaussian windows, images in [0, 1]."""
    a, b = _as_chw(image_a), _as_chw(image_b)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    S, _ = _ssim_terms(a, b, kernel_size, sigma, stride)
    return float(S.mean())


def ssim_and_grad(image_a, image_b, kernel_size: int = 11, sigma: float = 1.5, stride: int = 1):
    """SSIM value and its gradient with respect to ``image_a``."""
    a, b = _as_chw(image_a), _as_chw(image_b)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    S, (Gh, Gw, mu_a, mu_b, A1, A2, B1, B2) = _ssim_terms(a, b, kernel_size, sigma, stride)
    dS = 1.0 / S.size
    # grouped so every term cancels exactly when a == b
    g_mu = dS * S * ((2 * mu_b / A1 - 2 * mu_a / B1) + (2 * mu_a / B2 - 2 * mu_b / A2))
    g_ab = dS * S * (2.0 / A2)
    g_sum = dS * S * (2.0 / A2 - 2.0 / B2)
    grad = _filt_adjoint(Gh, Gw, g_mu) + a * _filt_adjoint(Gh, Gw, g_sum) + (b - a) * _filt_adjoint(Gh, Gw, g_ab)
    if np.ndim(image_a) == 3:
        grad = np.moveaxis(grad, 0, -1)
    return float(S.mean()), grad.reshape(np.shape(image_a))


def s3im_patches(shape, patch_size: int, repeats: int, rng) -> list:
    """Top-left corners of the random crops; drawn in (row, col) order per repeat."""
    H, W = shape[:2]
    if patch_size > min(H, W):
        raise ValueError(f"patch size {patch_size} exceeds image size {H}x{W}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = []
    for _ in range(repeats):
        y0 = int(rng.integers(0, H - patch_size + 1))
        x0 = int(rng.integers(0, W - patch_size + 1))
        out.append((y0, x0))
    return out


def s3im(rendered, target, patch_size: int = 64, kernel_size: int = 11, stride: int = 1, repeats: int = 10,
         rng=0, sigma: float = 1.5):
    """Mean ``1 - SSIM`` over ``repeats`` identical random crops of both images."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image sizes differ: {rendered.shape} vs {target.shape}")
    grad = np.zeros_like(rendered)
    total = 0.0
    P = patch_size
    corners = s3im_patches(rendered.shape, P, repeats, rng)
    # identical crops give identical terms; evaluate each distinct one once
    for (y0, x0), count in sorted(Counter(corners).items()):
        val, g = ssim_and_grad(rendered[y0:y0 + P, x0:x0 + P], target[y0:y0 + P, x0:x0 + P],
                               kernel_size, sigma, stride)
        total += count * (1.0 - val)
        grad[y0:y0 + P, x0:x0 + P] -= (count / repeats) * g
    return total / repeats, grad


def _scatter_add(target: np.ndarray, index: np.ndarray, values: np.ndarray) -> None:
    """``target[index] += values`` with repeated indices summed (bincount is far faster than ufunc.at)."""
    n = len(target)
    flat_t = target.reshape(n, -1)
    flat_v = values.reshape(len(index), -1)
    for c in range(flat_t.shape[1]):
        flat_t[:, c] += np.bincount(index, weights=flat_v[:, c], minlength=n)


# --- neighbourhood regularizers -----------------------------------------------


def knn_graph(points, k: int, include_self: bool = False) -> np.ndarray:
    """(N, k) neighbour indices. With ``include_self`` the first column is the point itself."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        return np.zeros((0, k), dtype=np.int64)
    extra = 0 if include_self else 1
    kk = min(k + extra, n)
    _, idx = cKDTree(points).query(points, k=kk)
    idx = np.asarray(idx).reshape(n, kk)
    rows = np.arange(n)
    if include_self:
        # force self into column 0 even with duplicate points
        out = np.empty_like(idx)
        out[:, 0] = rows
        for i in range(n):
            rest = idx[i][idx[i] != i]
            out[i, 1:] = rest[:kk - 1]
        return out
    out = np.empty((n, kk - 1), dtype=np.int64)
    for i in range(n):
        rest = idx[i][idx[i] != i]
        out[i] = rest[:kk - 1]
    return out


def iso_loss(means, covs, ref_means, ref_covs, neighbors, lambda_mu: float = 1.0, lambda_sigma: float = 0.1,
             with_reference: bool = False):
    """As-isometric-as-possible penalty over a fixed neighbour graph.

    Distances are Euclidean between means and Frobenius between covariances.
    Returns ``(value, grad_means, grad_covs)``; with ``with_reference`` the
    gradients on ``ref_means`` and ``ref_covs`` are appended. The canonical
    side is made of learned parameters too, and dropping its gradient lets the
    covariance term grow scales without bound.
    """
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    n, k = neighbors.shape
    i = np.repeat(np.arange(n), k)
    j = neighbors.reshape(-1)

    dm = means[i] - means[j]
    d = np.linalg.norm(dm, axis=1)
    d0 = np.linalg.norm(ref_means[i] - ref_means[j], axis=1)
    dc = covs[i] - covs[j]
    e = np.linalg.norm(dc.reshape(len(i), -1), axis=1)
    e0 = np.linalg.norm((ref_covs[i] - ref_covs[j]).reshape(len(i), -1), axis=1)
    value = float(lambda_mu * np.abs(d - d0).sum() + lambda_sigma * np.abs(e - e0).sum())

    s_mu = lambda_mu * np.sign(d - d0) / np.where(d > 0, d, 1.0)
    s_mu[d == 0] = 0.0
    g_edge = s_mu[:, None] * dm
    g_means = np.zeros_like(means)
    _scatter_add(g_means, i, g_edge)
    _scatter_add(g_means, j, -g_edge)
    s_c = lambda_sigma * np.sign(e - e0) / np.where(e > 0, e, 1.0)
    s_c[e == 0] = 0.0
    g_cedge = s_c[:, None, None] * dc
    g_covs = np.zeros_like(covs)
    _scatter_add(g_covs, i, g_cedge)
    _scatter_add(g_covs, j, -g_cedge)
    if not with_reference:
        return value, g_means, g_covs

    dm0 = ref_means[i] - ref_means[j]
    r_mu = -lambda_mu * np.sign(d - d0) / np.where(d0 > 0, d0, 1.0)
    r_mu[d0 == 0] = 0.0
    r_edge = r_mu[:, None] * dm0
    g_ref_means = np.zeros_like(ref_means, dtype=np.float64)
    _scatter_add(g_ref_means, i, r_edge)
    _scatter_add(g_ref_means, j, -r_edge)
    dc0 = ref_covs[i] - ref_covs[j]
    r_c = -lambda_sigma * np.sign(e - e0) / np.where(e0 > 0, e0, 1.0)
    r_c[e0 == 0] = 0.0
    r_cedge = r_c[:, None, None] * dc0
    g_ref_covs = np.zeros_like(ref_covs, dtype=np.float64)
    _scatter_add(g_ref_covs, i, r_cedge)
    _scatter_add(g_ref_covs, j, -r_cedge)
    return value, g_means, g_covs, g_ref_means, g_ref_covs


@njit(cache=True)
def _std_kernel(X, neighbors, col_scale):
    n, k = neighbors.shape
    D = X.shape[1]
    grad = np.zeros_like(X)
    value = 0.0
    for i in range(n):
        for d in range(D):
            m = 0.0
            for a in range(k):
                m += X[neighbors[i, a], d]
            m /= k
            var = 0.0
            for a in range(k):
                t = X[neighbors[i, a], d] - m
                var += t * t
            std = math.sqrt(var / k)
            value += col_scale[d] * std
            if std > 0.0:
                c = col_scale[d] / (k * std)
                for a in range(k):
                    j = neighbors[i, a]
                    grad[j, d] += c * (X[j, d] - m)
    return value, grad


def _std_terms(blocks, neighbors):
    """Sum over ``blocks`` of the mean-over-Gaussians, mean-over-dimensions neighbourhood std.

    All blocks are stacked column-wise and handled in one pass.
    """
    n = len(neighbors)
    flat = [np.asarray(b, dtype=np.float64).reshape(n, -1) for b in blocks]
    X = np.ascontiguousarray(np.concatenate(flat, axis=1))
    col_scale = np.concatenate([np.full(f.shape[1], 1.0 / (n * f.shape[1])) for f in flat])
    value, grad = _std_kernel(X, np.ascontiguousarray(neighbors, dtype=np.int64), col_scale)
    out, c = [], 0
    for b, f in zip(blocks, flat):
        out.append(grad[:, c:c + f.shape[1]].reshape(np.shape(b)))
        c += f.shape[1]
    return float(value), out


def _std_term(values, neighbors):
    """Mean over Gaussians of the per-dimension neighbourhood std averaged over dimensions."""
    value, (grad,) = _std_terms([values], neighbors)
    return value, grad


def gaussian_reg_loss(gset, neighbors, lambda_w: float = 0.01, lambda_s: float = 0.01):
    """Neighbourhood-smoothness regularizer on a canonical Gaussian set.

    ``neighbors`` is (N, k) and must include each Gaussian itself. Returns
    ``(value, grads)`` with ``grads`` keyed like ``GaussianSet.param_arrays``.
    """
    n = len(gset)
    scales = gset.scales
    opacity = gset.opacity
    grads = {}
    value = 0.0
    blocks = [gset.means, gset.quats, scales, opacity, gset.sh]
    if gset.weights is not None:
        eff = gset.weights.effective().T
        blocks.append(eff)
    value, g = _std_terms(blocks, neighbors)
    grads["means"], grads["quats"] = g[0], g[1]
    grads["scales_raw"] = g[2] * scales
    grads["opacity_raw"] = g[3] * opacity * (1 - opacity)
    grads["sh"] = g[4]

    smax_idx = np.argmax(scales, axis=1)
    smax = scales[np.arange(n), smax_idx]
    value += lambda_s * float(smax.mean())
    grads["scales_raw"][np.arange(n), smax_idx] += lambda_s * smax / n

    if gset.weights is not None:
        delta = gset.weights.delta.T
        g_eff = g[5]
        dn = np.linalg.norm(delta, axis=1)
        en = np.linalg.norm(eff, axis=1)
        value += lambda_w * float((dn + en).mean())
        g_delta = g_eff
        g_delta += lambda_w * delta / np.where(dn > 0, dn, 1.0)[:, None] / n
        g_delta += lambda_w * eff / np.where(en > 0, en, 1.0)[:, None] / n
        grads["delta_weights"] = g_delta.T
    return value, grads


def nearest_joint(body_points, joint_points, joint_radii=None) -> np.ndarray:
    """Index of the nearest joint point, with distances divided by ``joint_radii`` when given.

    The scaled distance keeps points on a thick limb from latching onto the
    axis of a thin neighbouring limb.
    """
    body_points = np.asarray(body_points, dtype=np.float64)
    if joint_radii is None:
        return cKDTree(joint_points).query(body_points)[1]
    d2 = np.sum((body_points[:, None, :] - np.asarray(joint_points)[None]) ** 2, axis=2)
    return np.argmin(d2 / np.asarray(joint_radii, dtype=np.float64)[None] ** 2, axis=1)


def collision_terms(body_points, garment_points, joint_points, radius=None, joint_radii=None, joint_index=None):
    """Nearest garment point and nearest joint point per body point, plus the active mask.

    A precomputed ``joint_index`` skips the joint lookup.
    """
    body_points = np.asarray(body_points, dtype=np.float64)
    dist_c, c_idx = cKDTree(garment_points).query(body_points)
    k_idx = nearest_joint(body_points, joint_points, joint_radii) if joint_index is None else joint_index
    active = np.ones(len(body_points), dtype=bool) if radius is None else dist_c <= radius
    return c_idx, k_idx, active


def collision_loss(body_points, garment_points, joint_points, margin: float = 0.0, radius=None, joint_radii=None,
                   joint_index=None):
    """Cubed hinge on ``(v_c - v_b) . (v_b - v_k)`` summed over body points.

    ``radius`` (optional) ignores body points with no garment point within
    that distance. ``joint_radii`` switches the joint lookup to the scaled
    distance of ``nearest_joint``. Returns ``(value, grad_body, grad_garment)``.
    """
    body_points = np.asarray(body_points, dtype=np.float64)
    garment_points = np.asarray(garment_points, dtype=np.float64)
    joint_points = np.asarray(joint_points, dtype=np.float64)
    g_body = np.zeros_like(body_points)
    g_garm = np.zeros_like(garment_points)
    if len(body_points) == 0 or len(garment_points) == 0:
        return 0.0, g_body, g_garm
    c_idx, k_idx, active = collision_terms(body_points, garment_points, joint_points, radius, joint_radii,
                                           joint_index)
    vb = body_points
    vc = garment_points[c_idx]
    vk = joint_points[k_idx]
    out = vb - vk
    dot = np.sum((vc - vb) * out, axis=1)
    h = np.where(active, np.maximum(0.0, margin - dot), 0.0)
    value = float(np.sum(h**3))
    coef = -3.0 * h**2
    g_body += coef[:, None] * (vc - 2.0 * vb + vk)
    _scatter_add(g_garm, c_idx, coef[:, None] * out)
    return value, g_body, g_garm


def collision_clearance(body_points, garment_points, joint_points, radius=None, joint_radii=None) -> np.ndarray:
    """Signed distance of each body point's nearest garment point along the joint-to-body direction."""
    body_points = np.asarray(body_points, dtype=np.float64)
    c_idx, k_idx, active = collision_terms(body_points, garment_points, joint_points, radius, joint_radii)
    out = body_points - joint_points[k_idx]
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    clearance = np.sum((garment_points[c_idx] - body_points) * out, axis=1)
    return clearance[active]


def total_isolation(entity_terms, weights: LossWeights) -> float:
    """Sum over entities of recon + mask + S3IM + Gaussian regularization."""
    return float(sum(t["recon"] + weights.mask * t["mask"] + weights.s3im * t["s3im"]
                     + weights.gaussian_reg * t["greg"] for t in entity_terms))


def total_joint(terms, weights: LossWeights) -> float:
    return float(terms["recon"] + weights.mask * terms["mask"] + weights.s3im * terms["s3im"]
                 + weights.gaussian_reg * terms["greg"] + weights.iso * terms["iso"]
                 + weights.collision * terms["col"])
