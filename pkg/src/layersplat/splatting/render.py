from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .._rotations import quat_to_matrix, quat_to_matrix_backward
from ..gaussians import covariance_backward, covariance_from_rotation, sh_basis, sh_basis_backward, sh_degree_from_count, sigmoid
from . import _kernels as K
from .camera import Camera, projection_jacobian


@dataclass
class RenderConfig:
    tile_size: int = 16
    cutoff_sigma: float = 3.0
    alpha_max: float = 0.99
    min_transmittance: float = 1e-4
    dilation: float = 0.3


@dataclass
class SplatInputs:
    """Observation-space arrays the rasterizer consumes for one entity."""

    means: np.ndarray
    cov_rotations: np.ndarray
    sh_rotations: np.ndarray
    scales_raw: np.ndarray
    opacity_raw: np.ndarray
    sh: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.means)


def splat_inputs(obj) -> SplatInputs:
    """Accept a canonical ``GaussianSet`` (rendered as-is) or a ``DeformedGaussians``."""
    if isinstance(obj, SplatInputs):
        return obj
    if hasattr(obj, "cov_rotations"):
        return SplatInputs(obj.means, obj.cov_rotations, obj.rotations, obj.scales_raw,
                           obj.opacity_raw, obj.sh, obj.labels)
    R = quat_to_matrix(obj.quats)
    return SplatInputs(obj.means, R, R, obj.scales_raw, obj.opacity_raw, obj.sh, obj.labels)


@dataclass
class SplatGrads:
    means: np.ndarray
    cov_rotations: np.ndarray
    sh_rotations: np.ndarray
    scales_raw: np.ndarray
    opacity_raw: np.ndarray
    sh: np.ndarray
    mean2d_norm: np.ndarray
    visible: np.ndarray

    def quats(self, quats: np.ndarray) -> np.ndarray:
        """Gradient on quaternions for a set rendered directly from ``quats``."""
        return quat_to_matrix_backward(quats, self.cov_rotations + self.sh_rotations)


@dataclass
class _Cache:
    camera: Camera
    config: RenderConfig
    background: np.ndarray
    slices: list
    means: np.ndarray
    cov_rot: np.ndarray
    sh_rot: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    p_cam: np.ndarray
    visible: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    local_dirs: np.ndarray
    basis: np.ndarray
    color_pre: np.ndarray
    colors: np.ndarray
    ent: np.ndarray
    offsets: np.ndarray
    ids: np.ndarray
    tiles_x: int
    final_t: np.ndarray
    last: np.ndarray


@dataclass
class RenderOutput:
    image: np.ndarray
    entity_alpha: np.ndarray
    entities: tuple
    alpha: np.ndarray
    depth: np.ndarray
    n_contrib: np.ndarray
    visible: np.ndarray
    cache: _Cache = field(repr=False, default=None)

    def alpha_of(self, entity: str) -> np.ndarray:
        return self.entity_alpha[self.entities.index(entity)]


class RenderInputError(ValueError):
    pass


def _check_finite(inp: SplatInputs, offset: int):
    if len(inp) == 0:
        return
    bad = ~(np.all(np.isfinite(inp.means), axis=1)
            & np.all(np.isfinite(inp.scales_raw), axis=1)
            & np.isfinite(inp.opacity_raw)
            & np.all(np.isfinite(inp.sh.reshape(len(inp), -1)), axis=1)
            & np.all(np.isfinite(inp.cov_rotations.reshape(len(inp), -1)), axis=1)
            & np.all(np.isfinite(inp.sh_rotations.reshape(len(inp), -1)), axis=1))
    if np.any(bad):
        idx = np.flatnonzero(bad) + offset
        raise RenderInputError(f"non-finite attributes on Gaussian(s) {idx[:10].tolist()}")


def render(sets, camera: Camera, background=(0.0, 0.0, 0.0), config: RenderConfig | None = None) -> RenderOutput:
    """Splat one or more Gaussian sets into an image with per-entity alpha maps.

    Sets may be canonical ``GaussianSet``s, ``DeformedGaussians`` or raw
    ``SplatInputs``. Entities are keyed by label in order of first appearance.
    """
    config = config or RenderConfig()
    if not isinstance(sets, (list, tuple)):
        sets = [sets]
    inputs = [splat_inputs(s) for s in sets]
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    W, H = int(camera.width), int(camera.height)

    slices, start = [], 0
    for inp in inputs:
        _check_finite(inp, start)
        slices.append(slice(start, start + len(inp)))
        start += len(inp)
    n = start

    labels = np.concatenate([inp.labels for inp in inputs]) if inputs else np.zeros(0, dtype=str)
    uniq, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order_seen = np.argsort(first, kind="stable")
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[order_seen] = np.arange(len(uniq))
    entities = tuple(str(u) for u in uniq[order_seen])
    ent = rank[inverse.reshape(-1)].astype(np.int64)
    if n:
        means = np.concatenate([i.means for i in inputs])
        cov_rot = np.concatenate([i.cov_rotations for i in inputs])
        sh_rot = np.concatenate([i.sh_rotations for i in inputs])
        scales = np.exp(np.concatenate([i.scales_raw for i in inputs]))
        opacity = sigmoid(np.concatenate([i.opacity_raw for i in inputs]))
        degrees = {i.sh.shape[2] for i in inputs}
        if len(degrees) != 1:
            raise RenderInputError("all sets in one render must share the SH degree")
        sh = np.concatenate([i.sh for i in inputs])
    else:
        means = np.zeros((0, 3))
        cov_rot = sh_rot = np.zeros((0, 3, 3))
        scales = np.zeros((0, 3))
        opacity = np.zeros(0)
        sh = np.zeros((0, 3, 1))

    Rw, tw = camera.rotation, camera.translation
    p_cam = means @ Rw.T + tw
    z = p_cam[:, 2]
    visible = z > camera.near
    zs = np.where(visible, z, 1.0)
    p_safe = np.where(visible[:, None], p_cam, np.array([0.0, 0.0, 1.0]))

    cov3 = covariance_from_rotation(cov_rot, scales)
    J = projection_jacobian(np.column_stack([p_safe[:, :2], zs]), camera)
    T = J @ Rw
    cov2d = T @ cov3 @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += config.dilation
    cov2d[:, 1, 1] += config.dilation
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    visible &= det > 0
    det_safe = np.where(visible, det, 1.0)
    conic = np.column_stack([c / det_safe, -b / det_safe, a / det_safe])
    mean2d = np.column_stack([camera.fx * p_safe[:, 0] / zs + camera.cx, camera.fy * p_safe[:, 1] / zs + camera.cy])

    offs = means - camera.center
    dist = np.linalg.norm(offs, axis=1)
    dist_safe = np.where(dist > 0, dist, 1.0)
    dirs = offs / dist_safe[:, None]
    local_dirs = np.einsum("nji,nj->ni", sh_rot, dirs)
    degree = sh_degree_from_count(sh.shape[2])
    basis = sh_basis(local_dirs, degree)
    color_pre = np.einsum("nck,nk->nc", sh, basis) + 0.5
    colors = np.maximum(color_pre, 0.0)

    tile = config.tile_size
    tiles_x = (W + tile - 1) // tile
    tiles_y = (H + tile - 1) // tile
    rects = np.zeros((n, 5), dtype=np.int64)
    rects[:, 4] = tiles_x
    if np.isfinite(config.cutoff_sigma):
        lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
        radius = np.ceil(config.cutoff_sigma * np.sqrt(np.maximum(lam, 0.0)))
        with np.errstate(invalid="ignore"):
            px0 = np.ceil(mean2d[:, 0] - radius)
            px1 = np.floor(mean2d[:, 0] + radius)
            py0 = np.ceil(mean2d[:, 1] - radius)
            py1 = np.floor(mean2d[:, 1] + radius)
        on = visible & (px1 >= 0) & (px0 <= W - 1) & (py1 >= 0) & (py0 <= H - 1)
        rects[:, 0] = np.clip(px0, 0, W - 1).astype(np.int64) // tile
        rects[:, 1] = np.clip(px1, 0, W - 1).astype(np.int64) // tile
        rects[:, 2] = np.clip(py0, 0, H - 1).astype(np.int64) // tile
        rects[:, 3] = np.clip(py1, 0, H - 1).astype(np.int64) // tile
        cutoff2 = float(config.cutoff_sigma) ** 2
    else:
        on = visible.copy()
        rects[:, 1] = tiles_x - 1
        rects[:, 3] = tiles_y - 1
        cutoff2 = np.inf
    rects[~on, 0] = 1
    rects[~on, 1] = 0

    order = np.argsort(np.where(visible, z, np.inf), kind="stable")
    order = order[visible[order]]
    offsets, ids = K.bin_gaussians(order, rects, tiles_x * tiles_y)
    image, ent_alpha, final_t, last, n_contrib, depth_map = K.forward_kernel(
        offsets, ids, mean2d, conic, opacity, colors, ent, z, max(len(entities), 1), bg,
        W, H, tile, tiles_x, cutoff2, config.alpha_max, config.min_transmittance)
    ent_alpha = ent_alpha[:len(entities)]

    cache = _Cache(camera, config, bg, slices, means, cov_rot, sh_rot, scales, opacity, sh, p_safe,
                   visible, cov2d, conic, mean2d, dirs, dist_safe, local_dirs, basis, color_pre,
                   colors, ent, offsets, ids, tiles_x, final_t, last)
    return RenderOutput(image, ent_alpha, entities, 1.0 - final_t, depth_map, n_contrib, visible, cache)


def render_backward(out: RenderOutput, grad_image, grad_entity_alpha=None, grad_alpha=None) -> list:
    """Analytic gradients of a scalar loss through :func:`render`.

    ``grad_image`` is dL/d(image) (H, W, 3); ``grad_entity_alpha`` is
    dL/d(entity_alpha) (E, H, W); ``grad_alpha`` is dL/d(total alpha).
    Returns one :class:`SplatGrads` per input set, in input order.
    """
    c = out.cache
    if c is None:
        raise RuntimeError("render output carries no cache; re-render before backward")
    cam, cfg = c.camera, c.config
    W, H = int(cam.width), int(cam.height)
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != (H, W, 3):
        raise ValueError(f"image gradient must be {(H, W, 3)}, got {grad_image.shape}")
    n_ent = max(len(out.entities), 1)
    g_alpha = np.zeros((n_ent, H, W))
    if grad_entity_alpha is not None:
        g_alpha[:len(out.entities)] += grad_entity_alpha
    if grad_alpha is not None:
        g_alpha += np.asarray(grad_alpha)[None]
    n = len(c.means)
    cutoff2 = float(cfg.cutoff_sigma) ** 2 if np.isfinite(cfg.cutoff_sigma) else np.inf

    pair = K.backward_kernel(c.offsets, c.ids, c.mean2d, c.conic, c.opacity, c.colors, c.ent,
                             c.background, c.final_t, c.last, grad_image, g_alpha,
                             W, H, cfg.tile_size, c.tiles_x, cutoff2, cfg.alpha_max)
    g = K.reduce_pairs(c.ids, pair, n)

    vis = c.visible
    g_mean2d = g[:, K.G_U:K.G_V + 1]
    g_col = g[:, K.G_R:K.G_B + 1] * (c.color_pre > 0)
    g_opacity_raw = g[:, K.G_OPA] * c.opacity * (1.0 - c.opacity)

    # radiance
    g_sh = g_col[:, :, None] * c.basis[:, None, :]
    g_basis = np.einsum("nc,nck->nk", g_col, c.sh)
    g_local = sh_basis_backward(c.local_dirs, sh_degree_from_count(c.sh.shape[2]), g_basis)
    g_sh_rot = c.dirs[:, :, None] * g_local[:, None, :]
    g_dirs = np.einsum("nij,nj->ni", c.sh_rot, g_local)
    g_means = (g_dirs - c.dirs * np.sum(c.dirs * g_dirs, axis=1, keepdims=True)) / c.dist[:, None]

    # conic -> screen covariance
    gf = np.empty((n, 2, 2))
    gf[:, 0, 0] = g[:, K.G_CA]
    gf[:, 0, 1] = gf[:, 1, 0] = 0.5 * g[:, K.G_CB]
    gf[:, 1, 1] = g[:, K.G_CC]
    Ci = np.empty((n, 2, 2))
    Ci[:, 0, 0] = c.conic[:, 0]
    Ci[:, 0, 1] = Ci[:, 1, 0] = c.conic[:, 1]
    Ci[:, 1, 1] = c.conic[:, 2]
    g_cov2d = -Ci @ gf @ Ci

    # screen covariance -> world covariance and Jacobian
    Rw = cam.rotation
    J = projection_jacobian(c.p_cam, cam)
    T = J @ Rw
    cov3 = covariance_from_rotation(c.cov_rot, c.scales)
    g_cov3 = np.swapaxes(T, 1, 2) @ g_cov2d @ T
    g_T = 2.0 * g_cov2d @ T @ cov3
    g_J = g_T @ Rw.T
    x, y, z = c.p_cam[:, 0], c.p_cam[:, 1], c.p_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    g_p = np.zeros((n, 3))
    g_p[:, 0] = -fx / z**2 * g_J[:, 0, 2] + fx / z * g_mean2d[:, 0]
    g_p[:, 1] = -fy / z**2 * g_J[:, 1, 2] + fy / z * g_mean2d[:, 1]
    g_p[:, 2] = (-fx / z**2 * g_J[:, 0, 0] + 2 * fx * x / z**3 * g_J[:, 0, 2]
                 - fy / z**2 * g_J[:, 1, 1] + 2 * fy * y / z**3 * g_J[:, 1, 2]
                 - fx * x / z**2 * g_mean2d[:, 0] - fy * y / z**2 * g_mean2d[:, 1])
    g_means += g_p @ Rw
    g_cov_rot, g_scales = covariance_backward(c.cov_rot, c.scales, g_cov3)
    g_scales_raw = g_scales * c.scales

    mean2d_norm = np.linalg.norm(g_mean2d, axis=1)
    mask = vis.astype(np.float64)
    results = []
    for sl in c.slices:
        m = mask[sl]
        results.append(SplatGrads(
            means=g_means[sl] * m[:, None],
            cov_rotations=g_cov_rot[sl] * m[:, None, None],
            sh_rotations=g_sh_rot[sl] * m[:, None, None],
            scales_raw=g_scales_raw[sl] * m[:, None],
            opacity_raw=g_opacity_raw[sl] * m,
            sh=g_sh[sl] * m[:, None, None],
            mean2d_norm=mean2d_norm[sl] * m,
            visible=vis[sl].copy(),
        ))
    return results
