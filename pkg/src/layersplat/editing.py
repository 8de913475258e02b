"""Post-training edits: entity recolouring, garment transfer between bodies, animation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .gaussians import GaussianSet, dc_from_rgb
from .geometry import Pose, Skeleton, SkinningWeights, deform_gaussians, forward_kinematics
from .losses import collision_loss, iso_loss, knn_graph, nearest_joint
from .splatting import Camera, RenderConfig, render

# Small keyword table for edit_color. Values are 8-bit sRGB-free triples,
# interpreted directly as radiance * 255.
COLOR_NAMES = {
    "black": (0, 0, 0),
    "white": (255, 255, 255),
    "gray": (128, 128, 128),
    "grey": (128, 128, 128),
    "red": (255, 0, 0),
    "crimson": (80, 0, 0),
    "maroon": (128, 0, 0),
    "orange": (255, 165, 0),
    "yellow": (255, 255, 0),
    "olive": (128, 128, 0),
    "green": (0, 128, 0),
    "lime": (0, 255, 0),
    "teal": (0, 128, 128),
    "cyan": (0, 255, 255),
    "blue": (0, 0, 255),
    "navy": (0, 0, 128),
    "purple": (128, 0, 128),
    "magenta": (255, 0, 255),
    "pink": (255, 192, 203),
    "brown": (139, 69, 19),
    "beige": (245, 245, 220),
    "khaki": (195, 176, 145),
}

_CHANNELS = {"r": 0, "g": 1, "b": 2}


def resolve_color(color) -> np.ndarray:
    """RGB triple in [0, 255] from a keyword or a 3-sequence."""
    if isinstance(color, str):
        key = color.strip().lower()
        if key not in COLOR_NAMES:
            raise ValueError(f"unknown colour name {color!r}; known: {', '.join(sorted(COLOR_NAMES))}")
        return np.asarray(COLOR_NAMES[key], dtype=np.float64)
    rgb = np.asarray(color, dtype=np.float64).reshape(-1)
    if rgb.shape != (3,):
        raise ValueError("colour must have three components")
    if not np.all(np.isfinite(rgb)) or np.any(rgb < 0) or np.any(rgb > 255):
        raise ValueError(f"RGB components must lie in [0, 255], got {rgb.tolist()}")
    return rgb


def _parse_swap(channels) -> tuple:
    if isinstance(channels, str):
        parts = channels.lower().replace("<->", ",").replace("-", ",").split(",")
        channels = [_CHANNELS[p.strip()] for p in parts if p.strip()]
    a, b = (int(c) for c in channels)
    if not (0 <= a < 3 and 0 <= b < 3):
        raise ValueError("channel indices must be 0, 1 or 2")
    return a, b


def _edit_one(gset: GaussianSet, entity: str, rgb, mode: str, channels) -> GaussianSet:
    sel = gset.labels == entity
    if not sel.any():
        return gset
    sh = gset.sh.copy()
    if mode == "replace":
        sh[sel, :, 0] = dc_from_rgb(rgb / 255.0)
    else:
        a, b = channels
        sh[np.ix_(sel, [a, b])] = sh[np.ix_(sel, [b, a])]
    return replace(gset, sh=sh)


def edit_color(sets, entity: str, color=None, mode: str = "replace", channels=("r", "g")):
    """Recolour one entity.

    ``replace`` sets the DC coefficients so the view-independent radiance is
    ``color / 255`` and keeps higher bands. ``swap`` exchanges two colour
    channels across all coefficients. Accepts one ``GaussianSet`` or a list
    and returns the same kind; untouched sets are passed through as-is.
    """
    if mode not in ("replace", "swap"):
        raise ValueError(f"mode must be 'replace' or 'swap', got {mode!r}")
    rgb = resolve_color(color) if mode == "replace" else None
    chans = _parse_swap(channels) if mode == "swap" else None
    single = isinstance(sets, GaussianSet)
    seq = [sets] if single else list(sets)
    if not any(entity in set(s.labels.tolist()) for s in seq):
        known = sorted({lab for s in seq for lab in s.labels.tolist()})
        raise KeyError(f"unknown entity {entity!r}; available: {known}")
    out = [_edit_one(s, entity, rgb, mode, chans) for s in seq]
    return out[0] if single else out


# --- garment transfer ---------------------------------------------------------


@dataclass
class TransferConfig:
    iterations: int = 200
    lr: float = 1e-3
    lambda_col: float = 1.0
    lambda_iso: float = 1e-8
    margin: float = 1e-4
    radius: float | None = 0.05
    knn: int = 5
    axis_neighbors: int = 16

    def __post_init__(self):
        if self.iterations < 0 or self.lr <= 0 or self.knn < 1 or self.axis_neighbors < 1:
            raise ValueError("invalid transfer configuration")


def skeleton_axis_points(skeleton: Skeleton, per_bone: int = 8):
    """Samples along every parent-child bone segment, owned by the parent joint."""
    pos = skeleton.rest_joint_positions()
    t = (np.arange(per_bone) + 0.5) / per_bone
    pts, owner = [pos], [np.arange(skeleton.n_joints)]
    for j, p in enumerate(skeleton.parents):
        if p >= 0:
            pts.append(pos[p] + t[:, None] * (pos[j] - pos[p]))
            owner.append(np.full(per_bone, p))
    return np.concatenate(pts), np.concatenate(owner)


def displace_points(points, source_vertices, target_vertices, k: int = 16) -> np.ndarray:
    """Carry points along with the body by inverse-distance-weighted vertex displacements."""
    points = np.asarray(points, dtype=np.float64)
    k = min(k, len(source_vertices))
    dist, idx = cKDTree(source_vertices).query(points, k=k)
    dist, idx = dist.reshape(len(points), k), idx.reshape(len(points), k)
    w = 1.0 / np.maximum(dist, 1e-9)
    w /= w.sum(axis=1, keepdims=True)
    disp = np.asarray(target_vertices) - np.asarray(source_vertices)
    return points + np.einsum("nk,nkd->nd", w, disp[idx])


def _local_scale(points, source_vertices, target_vertices, k: int = 32) -> np.ndarray:
    """Ratio of target to source spread of the ``k`` vertices around each point."""
    k = min(k, len(source_vertices))
    _, idx = cKDTree(source_vertices).query(points, k=k)
    idx = np.asarray(idx).reshape(len(points), k)
    src = np.asarray(source_vertices)[idx]
    tgt = np.asarray(target_vertices)[idx]
    s0 = np.linalg.norm(src - src.mean(axis=1, keepdims=True), axis=2).mean(axis=1)
    s1 = np.linalg.norm(tgt - tgt.mean(axis=1, keepdims=True), axis=2).mean(axis=1)
    return s1 / np.maximum(s0, 1e-12)


def transfer_joints(source_body, target_body, axis_points=None, axis_radii=None,
                    config: TransferConfig | None = None, target_skeleton: Skeleton | None = None):
    """Collision joint points (and scaled radii) on the target body, as used by ``transfer_garment``."""
    config = config or TransferConfig()
    src_v = np.asarray(source_body.rest_vertices, dtype=np.float64)
    tgt_v = np.asarray(target_body.rest_vertices, dtype=np.float64)
    if axis_points is None:
        joints, _ = skeleton_axis_points(target_skeleton or target_body.skeleton())
        return joints, None
    joints = displace_points(axis_points, src_v, tgt_v, config.axis_neighbors)
    if axis_radii is not None:
        # radii follow the local scale change of the body
        axis_radii = np.asarray(axis_radii, dtype=np.float64) * _local_scale(axis_points, src_v, tgt_v)
    return joints, axis_radii


def transfer_garment(garment: GaussianSet, source_body, target_body, config: TransferConfig | None = None, *,
                     source_skeleton: Skeleton | None = None, target_skeleton: Skeleton | None = None,
                     axis_points=None, axis_radii=None) -> GaussianSet:
    """Re-bind a garment fitted on ``source_body`` to ``target_body``.

    Both bodies are ``BodyTemplate`` objects with the same vertex count and
    vertex order. Each Gaussian keeps its offset from the nearest source
    vertex, re-applied at the same vertex of the target. Weights come from the
    target vertex (with zero correction). A short Adam loop then moves the means
    under the collision and isometry terms. The collision gradient uses
    ``config.margin`` so points end with some clearance; the loop stops as
    soon as the zero-margin collision loss is exactly zero, so a garment that
    already rests outside the target body is returned unmoved. ``axis_points`` are the collision
    joint points in the source canonical frame (``axis_radii`` optionally
    scales the joint lookup); by default bone samples of the target skeleton
    are used.
    """
    config = config or TransferConfig()
    if len(garment) == 0:
        raise ValueError("garment has no Gaussians")
    src_v = np.asarray(source_body.rest_vertices, dtype=np.float64)
    tgt_v = np.asarray(target_body.rest_vertices, dtype=np.float64)
    if src_v.shape != tgt_v.shape:
        raise ValueError(f"body vertex counts differ: {len(src_v)} vs {len(tgt_v)}")
    source_skeleton = source_skeleton or source_body.skeleton()
    target_skeleton = target_skeleton or target_body.skeleton()
    if not source_skeleton.same_topology(target_skeleton):
        raise ValueError("source and target skeletons differ in joint count or hierarchy")

    _, nearest = cKDTree(src_v).query(garment.means)
    means0 = garment.means - src_v[nearest] + tgt_v[nearest]
    base = np.asarray(target_body.base_weights)[:, nearest]
    weights = SkinningWeights(base.copy())

    joints, axis_radii = transfer_joints(source_body, target_body, axis_points, axis_radii, config,
                                         target_skeleton)

    means = means0.copy()
    covs = garment.covariances()
    nb = knn_graph(means0, config.knn)
    m = np.zeros_like(means)
    v = np.zeros_like(means)
    b1, b2, eps = 0.9, 0.999, 1e-15
    k_idx = nearest_joint(tgt_v, joints, axis_radii)
    for it in range(1, config.iterations + 1):
        if collision_loss(tgt_v, means, joints, 0.0, config.radius, joint_index=k_idx)[0] == 0.0:
            break
        _, _, g_col = collision_loss(tgt_v, means, joints, config.margin, config.radius, joint_index=k_idx)
        _, g_iso, _ = iso_loss(means, covs, means0, covs, nb, 1.0, 0.0)
        g = config.lambda_col * g_col + config.lambda_iso * g_iso
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**it)
        vhat = v / (1 - b2**it)
        means -= config.lr * mhat / (np.sqrt(vhat) + eps)
    return replace(garment, means=means, quats=garment.quats.copy(), scales_raw=garment.scales_raw.copy(),
                   opacity_raw=garment.opacity_raw.copy(), sh=garment.sh.copy(), labels=garment.labels.copy(),
                   weights=weights)


def replace_entity(sets, new_set: GaussianSet) -> list:
    """Swap in ``new_set`` for the set with the same label; other sets are returned as the same objects."""
    out, hit = [], False
    for s in sets:
        if s.label == new_set.label:
            out.append(new_set)
            hit = True
        else:
            out.append(s)
    if not hit:
        raise KeyError(f"no entity labelled {new_set.label!r}")
    return out


# --- animation ----------------------------------------------------------------


def animate(sets, skeleton: Skeleton, poses, cameras, background=(0.0, 0.0, 0.0),
            config: RenderConfig | None = None, out_dir=None) -> list:
    """Render one image per pose. ``cameras`` is one camera or one per pose.

    With ``out_dir`` the frames are also written as ``frame_0000.png`` and so on.
    """
    poses = list(poses)
    cams = [cameras] * len(poses) if isinstance(cameras, Camera) else list(cameras)
    if len(cams) != len(poses):
        raise ValueError(f"{len(poses)} poses but {len(cams)} cameras")
    images = []
    for pose in poses:
        if not isinstance(pose, Pose):
            raise TypeError("poses must be Pose records")
    for pose, cam in zip(poses, cams):
        bones = forward_kinematics(skeleton, pose)
        deformed = [deform_gaussians(s, s.weights, bones) for s in sets]
        images.append(render(deformed, cam, background, config).image)
    if out_dir is not None:
        from .io import save_png
        out_dir = Path(out_dir)
        for i, img in enumerate(images):
            save_png(out_dir / f"frame_{i:04d}.png", img)
    return images
