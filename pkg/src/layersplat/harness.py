"""Synthetic multi-entity scenes and image metrics.

A scene is a capsule humanoid with shell garments, rendered from a ring of
cameras under small seeded poses. The ground-truth Gaussians, targets and
per-entity masks stand in for captured data with segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rotations import matrix_to_quat
from .gaussians import GaussianSet, dc_from_rgb, logit, sh_coeff_count
from .geometry import Pose, Skeleton, deform_gaussians, forward_kinematics
from .losses import ssim
from .splatting import Camera, RenderConfig, render
from .templates import (BodyTemplate, GarmentSpec, capsule_body_template, farthest_point_sample,
                        generate_garment_template, humanoid_axis_points, humanoid_surface_distance,
                        init_gaussians_from_vertices,
                        mean_nn_spacing)


@dataclass(frozen=True)
class GarmentDef:
    name: str
    regions: tuple
    layer: int
    count: int
    color: tuple


DEFAULT_GARMENTS = (
    GarmentDef("pants", ("hips", "l_thigh", "r_thigh"), 1, 600, (0.16, 0.24, 0.58)),
    GarmentDef("shirt", ("torso", "l_upper_arm", "r_upper_arm"), 2, 600, (0.80, 0.30, 0.22)),
)


@dataclass
class SceneSpec:
    body_gaussians: int = 800
    garments: tuple = DEFAULT_GARMENTS
    n_views: int = 36
    n_test_views: int = 6
    image_size: int = 64
    focal: float = 100.0
    camera_distance: float = 3.0
    look_at: tuple = (0.0, 0.88, 0.0)
    pose_scale: float = 0.15
    sh_degree: int = 1
    template_vertices: int = 3000
    shell_offset: float = 0.02
    background: tuple = (0.0, 0.0, 0.0)
    mask_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        garments = (g if isinstance(g, GarmentDef) else GarmentDef(**g) for g in self.garments)
        self.garments = tuple(GarmentDef(g.name, tuple(g.regions), int(g.layer), int(g.count), tuple(g.color))
                              for g in garments)
        self.look_at = tuple(self.look_at)
        self.background = tuple(self.background)
        if self.body_gaussians < 1 or self.n_views < 1 or self.image_size < 1:
            raise ValueError("scene needs at least one Gaussian, one view and one pixel")

    @property
    def entities(self) -> tuple:
        return ("body",) + tuple(g.name for g in self.garments)


@dataclass
class Frame:
    image: np.ndarray
    masks: np.ndarray
    camera: Camera
    pose: Pose


@dataclass
class SyntheticScene:
    spec: SceneSpec
    skeleton: Skeleton
    gt_sets: list
    frames: list
    test_frames: list
    axis_points: np.ndarray
    axis_owner: np.ndarray
    axis_radius: np.ndarray | None = None
    template: BodyTemplate | None = field(default=None, repr=False)

    @property
    def entities(self) -> tuple:
        return tuple(s.label for s in self.gt_sets)


def posed_axis_points(scene_or_points, owner=None, bones=None) -> np.ndarray:
    """Axis points carried rigidly by their joint's bone transform."""
    if owner is None:
        points, owner = scene_or_points.axis_points, scene_or_points.axis_owner
    else:
        points = scene_or_points
    B = bones[owner]
    return np.einsum("nij,nj->ni", B[:, :3, :3], points) + B[:, :3, 3]


def _ring_cameras(spec: SceneSpec, azimuths, elevations):
    target = np.asarray(spec.look_at, dtype=np.float64)
    cams = []
    for az, el in zip(np.radians(azimuths), np.radians(elevations)):
        eye = target + spec.camera_distance * np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        cams.append(Camera.look_at(eye, target, fx=spec.focal, width=spec.image_size, height=spec.image_size))
    return cams


def _surface_frames(normals: np.ndarray) -> np.ndarray:
    """Rotations whose third column is the given normal."""
    z = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    helper = np.where(np.abs(z[:, :1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    x = np.cross(helper, z)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=2)


def _gt_colors(points: np.ndarray, base, rng: np.random.Generator) -> np.ndarray:
    """Base colour with smooth low-frequency variation over the surface."""
    phase = rng.uniform(0, 2 * np.pi, 3)
    wave = 0.08 * np.sin(4.0 * points[:, 1:2] + phase) + 0.05 * np.cos(5.0 * points[:, 0:1] - phase)
    return np.clip(np.asarray(base)[None, :] + wave, 0.02, 0.92)


def _gt_set(points, normals, label, color, weights, spec: SceneSpec, rng) -> GaussianSet:
    n = len(points)
    spacing = mean_nn_spacing(points)
    quats = matrix_to_quat(_surface_frames(normals))
    scales = np.log(np.array([0.7, 0.7, 0.2]) * spacing)
    sh = np.zeros((n, 3, sh_coeff_count(spec.sh_degree)))
    sh[:, :, 0] = dc_from_rgb(_gt_colors(points, color, rng))
    if spec.sh_degree > 0:
        sh[:, :, 1:4] = rng.normal(0, 0.03, (n, 3, 3))
    return GaussianSet(points.copy(), quats, np.tile(scales, (n, 1)), np.full(n, logit(0.95)), sh,
                       np.full(n, label), weights)


def _entity_points(template: BodyTemplate, spec: SceneSpec, count: int, garment: GarmentDef | None):
    """Vertices, normals and weights for one entity, thinned to ``count`` points."""
    verts = template.rest_vertices
    weights = template.weights()
    if garment is None:
        pts, nrm, w = verts, template.normals, weights
    else:
        gs = GarmentSpec(garment.name, garment.regions, spec.shell_offset, garment.layer)
        gt = generate_garment_template(verts, gs, regions=template.regions, normals=template.normals,
                                       weights=weights)
        # shell points pushed into a neighbouring limb at concave junctions are dropped
        ok = humanoid_surface_distance(gt.vertices) >= 0.5 * garment.layer * spec.shell_offset
        pts, nrm, w = gt.vertices[ok], gt.normals[ok], gt.weights.take(np.flatnonzero(ok))
    keep = np.sort(farthest_point_sample(pts, count, start=int(np.argmax(pts[:, 1]))))
    return pts[keep], nrm[keep], w.take(keep)


def random_pose(rng: np.random.Generator, n_joints: int, scale: float) -> Pose:
    rot = rng.normal(0, scale, (n_joints + 1, 3))
    rot[0] *= 0.5
    return Pose(np.zeros(3), rot)


def render_posed(sets, skeleton: Skeleton, pose: Pose, camera: Camera, background=(0.0, 0.0, 0.0),
                 config: RenderConfig | None = None):
    """Deform every set by the pose, then render them together."""
    bones = forward_kinematics(skeleton, pose)
    deformed = [deform_gaussians(s, s.weights, bones) for s in sets]
    return render(deformed, camera, background, config), deformed, bones


def make_scene(spec: SceneSpec | None = None) -> SyntheticScene:
    spec = spec or SceneSpec()
    rng = np.random.default_rng(spec.seed)
    template = capsule_body_template(spec.template_vertices, seed=spec.seed)
    skeleton = template.skeleton()

    gt_sets = []
    pts, nrm, w = _entity_points(template, spec, spec.body_gaussians, None)
    gt_sets.append(_gt_set(pts, nrm, "body", (0.86, 0.64, 0.52), w, spec, rng))
    for g in spec.garments:
        pts, nrm, w = _entity_points(template, spec, g.count, g)
        gt_sets.append(_gt_set(pts, nrm, g.name, g.color, w, spec, rng))

    n, m = spec.n_views, spec.n_test_views
    train_az = np.arange(n) * 360.0 / n
    train_el = np.resize([-8.0, 4.0, 16.0], n)
    test_az = np.arange(m) * 360.0 / max(m, 1) + 180.0 / max(n, 1) + 7.0
    test_el = np.resize([10.0, -4.0], m)
    cams = _ring_cameras(spec, train_az, train_el) + _ring_cameras(spec, test_az, test_el)

    frames = []
    for cam in cams:
        pose = random_pose(rng, skeleton.n_joints, spec.pose_scale)
        out, _, _ = render_posed(gt_sets, skeleton, pose, cam, spec.background)
        masks = out.entity_alpha >= spec.mask_threshold
        frames.append(Frame(out.image, masks, cam, pose))

    axis_pts, owner, axis_r = humanoid_axis_points()
    scene = SyntheticScene(spec, skeleton, gt_sets, frames[:n], frames[n:], axis_pts, owner, axis_r, template)
    seen = np.array([[f.masks[e].any() for e in range(len(gt_sets))] for f in scene.frames + scene.test_frames])
    if len(seen) and np.any(seen.mean(axis=0) < 0.8):
        low = [gt_sets[e].label for e in np.flatnonzero(seen.mean(axis=0) < 0.8)]
        raise ValueError(f"entities visible in fewer than 80% of views: {low}")
    return scene


def initial_sets(scene: SyntheticScene, seed: int = 1, jitter: float = 0.005) -> list:
    """Template-based starting sets: re-sampled surface, jittered, isotropic, gray, half opaque."""
    spec = scene.spec
    rng = np.random.default_rng(seed)
    template = capsule_body_template(spec.template_vertices, seed=spec.seed + 1000 + seed)
    sets = []
    counts = [spec.body_gaussians] + [g.count for g in spec.garments]
    defs = [None] + list(spec.garments)
    for label, count, g in zip(spec.entities, counts, defs):
        pts, _, w = _entity_points(template, spec, count, g)
        pts = pts + rng.normal(0, jitter, pts.shape)
        sets.append(init_gaussians_from_vertices(pts, label, sh_degree=spec.sh_degree, weights=w))
    return sets


# --- metrics ------------------------------------------------------------------


def psnr(image_a, image_b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; ``inf`` for identical inputs."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def mask_iou(alpha, threshold: float, gt_mask) -> float:
    pred = np.asarray(alpha) >= threshold
    gt = np.asarray(gt_mask, dtype=bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def masked_psnr(image, target, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("inf")
    return psnr(np.asarray(image)[mask], np.asarray(target)[mask])


def evaluate(sets, scene: SyntheticScene, frames=None, config: RenderConfig | None = None) -> dict:
    """Composite PSNR / SSIM and per-entity mask IoU averaged over ``frames`` (default: held-out)."""
    frames = scene.test_frames if frames is None else frames
    psnrs, ssims = [], []
    ious = {s.label: [] for s in sets}
    for fr in frames:
        out, _, _ = render_posed(sets, scene.skeleton, fr.pose, fr.camera, scene.spec.background, config)
        img = np.clip(out.image, 0.0, 1.0)
        psnrs.append(psnr(img, fr.image))
        ssims.append(ssim(img, fr.image))
        for e, label in enumerate(scene.entities):
            if label in out.entities:
                ious[label].append(mask_iou(out.alpha_of(label), scene.spec.mask_threshold, fr.masks[e]))
    return {
        "psnr": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
        "mask_iou": {k: float(np.mean(v)) for k, v in ious.items() if v},
        "views": len(frames),
    }


def benchmark_scene(n_gaussians: int = 20000, size: int = 540, seed: int = 0):
    """Random cloud of small Gaussians in front of a camera, for render timing."""
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n_gaussians, 4))
    sh = np.zeros((n_gaussians, 3, sh_coeff_count(1)))
    sh[:, :, 0] = dc_from_rgb(rng.uniform(0.1, 0.9, (n_gaussians, 3)))
    gset = GaussianSet(rng.uniform(-0.6, 0.6, (n_gaussians, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                       np.log(rng.uniform(0.004, 0.02, (n_gaussians, 3))), np.full(n_gaussians, logit(0.8)), sh,
                       np.full(n_gaussians, "cloud"))
    cam = Camera.look_at((0.0, 0.0, -2.5), (0.0, 0.0, 0.0), fx=size * 1.2, width=size, height=size)
    return gset, cam


def render_benchmark(n_gaussians: int = 20000, size: int = 540, repeats: int = 5, seed: int = 0) -> dict:
    """Median wall time of a forward render, after one warm-up call."""
    import time

    import numba
    gset, cam = benchmark_scene(n_gaussians, size, seed)
    render([gset], cam)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        render([gset], cam)
        times.append(time.perf_counter() - t0)
    return {"gaussians": n_gaussians, "width": size, "height": size, "threads": numba.get_num_threads(),
            "median_ms": 1000.0 * float(np.median(times)), "min_ms": 1000.0 * float(np.min(times))}
