"""Canonical body and garment templates sharing one skeleton.

Garments are built as normal-offset shells over labelled regions of the
body template. Layer ``i`` sits ``i * offset`` outside the body surface and
inherits the skinning weights of the body vertex it was grown from.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._rotations import axis_angle_to_matrix
from .gaussians import GaussianSet, sh_coeff_count
from .geometry import Skeleton, SkinningWeights


@dataclass
class BodyTemplate:
    rest_vertices: np.ndarray
    parents: np.ndarray
    joint_regressor: np.ndarray
    base_weights: np.ndarray
    shape_basis: np.ndarray | None = None
    pose_basis: np.ndarray | None = None
    offsets: np.ndarray | None = None
    faces: np.ndarray | None = None
    normals: np.ndarray | None = None
    regions: np.ndarray | None = None

    def __post_init__(self):
        self.rest_vertices = np.asarray(self.rest_vertices, dtype=np.float64)
        V = len(self.rest_vertices)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        n_k = len(self.parents)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.base_weights = np.asarray(self.base_weights, dtype=np.float64)
        if self.shape_basis is None:
            self.shape_basis = np.zeros((V, 3, 0))
        if self.pose_basis is None:
            self.pose_basis = np.zeros((V, 3, 9 * n_k))
        if self.offsets is None:
            self.offsets = np.zeros((V, 3))
        if self.regions is not None:
            self.regions = np.asarray(self.regions, dtype=str)
        checks = {
            "rest_vertices": (self.rest_vertices.shape, (V, 3)),
            "joint_regressor": (self.joint_regressor.shape, (n_k, V)),
            "base_weights": (self.base_weights.shape, (n_k, V)),
            "pose_basis": (self.pose_basis.shape, (V, 3, 9 * n_k)),
            "offsets": (np.shape(self.offsets), (V, 3)),
        }
        for name, (got, want) in checks.items():
            if tuple(got) != want:
                raise ValueError(f"{name} has shape {got}, expected {want}")
        if self.shape_basis.shape[:2] != (V, 3):
            raise ValueError("shape_basis must be (V, 3, n_betas)")
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("joint regressor rows must sum to 1")
        if self.regions is not None and self.regions.shape != (V,):
            raise ValueError("one region label per vertex required")

    @property
    def n_vertices(self) -> int:
        return len(self.rest_vertices)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_betas(self) -> int:
        return self.shape_basis.shape[2]

    def joints(self, beta=None) -> np.ndarray:
        verts = self.rest_vertices if beta is None else self.rest_vertices + self.shape_basis @ np.asarray(beta, float)
        return self.joint_regressor @ verts

    def skeleton(self, beta=None) -> Skeleton:
        return Skeleton.from_positions(self.joints(beta), self.parents)

    def weights(self) -> SkinningWeights:
        return SkinningWeights(self.base_weights.copy())


def pose_features(theta: np.ndarray) -> np.ndarray:
    """Flattened ``R(theta_j) - I`` over the per-joint rotations (global orientation excluded)."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    R = axis_angle_to_matrix(theta[1:])
    return (R - np.eye(3)).reshape(-1)


def canonical_body(template: BodyTemplate, beta=None, theta=None) -> np.ndarray:
    """T_can = T_bar + B_s(beta) + B_p(theta) + O."""
    out = template.rest_vertices.copy()
    if beta is not None:
        beta = np.asarray(beta, dtype=np.float64).reshape(-1)
        if beta.shape != (template.n_betas,):
            raise ValueError(f"beta must have {template.n_betas} entries, got {beta.shape[0]}")
        out += template.shape_basis @ beta
    if theta is not None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (template.n_joints + 1, 3):
            raise ValueError(f"theta must be ({template.n_joints + 1}, 3), got {theta.shape}")
        out += template.pose_basis @ pose_features(theta)
    return out + template.offsets


@dataclass(frozen=True)
class GarmentSpec:
    name: str
    regions: tuple = ()
    offset: float = 0.02
    layer: int = 1
    predicate: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.offset > 0:
            raise ValueError("garment offset distance must be positive")
        if self.layer < 1:
            raise ValueError("garment layer index starts at 1")
        if not self.regions and self.predicate is None:
            raise ValueError("garment spec needs regions or a predicate")

    def select(self, vertices: np.ndarray, regions: np.ndarray | None) -> np.ndarray:
        mask = np.zeros(len(vertices), dtype=bool)
        if self.regions:
            if regions is None:
                raise ValueError(f"garment {self.name!r} selects by region but the body has no region labels")
            mask |= np.isin(regions, list(self.regions))
        if self.predicate is not None:
            mask |= np.asarray(self.predicate(vertices), dtype=bool)
        return mask


@dataclass
class GarmentTemplate:
    name: str
    vertices: np.ndarray
    source_index: np.ndarray
    normals: np.ndarray
    layer: int
    weights: SkinningWeights | None = None


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (unnormalized face cross products summed per vertex)."""
    v = vertices[faces]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    out = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(out, faces[:, c], fn)
    return out


def radial_normals(vertices: np.ndarray, joints: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(joints).query(vertices)
    return vertices - joints[idx]


def _connected(points: np.ndarray, faces: np.ndarray | None, index: np.ndarray) -> bool:
    if len(index) <= 1:
        return True
    if faces is not None:
        keep = np.isin(faces, index).all(axis=1)
        sub = faces[keep]
        remap = -np.ones(int(faces.max()) + 1, dtype=np.int64)
        remap[index] = np.arange(len(index))
        sub = remap[sub]
        rows = np.concatenate([sub[:, 0], sub[:, 1], sub[:, 2]])
        cols = np.concatenate([sub[:, 1], sub[:, 2], sub[:, 0]])
    else:
        pts = points[index]
        tree = cKDTree(pts)
        nn = tree.query(pts, k=2)[0][:, 1]
        pairs = tree.query_pairs(2.5 * np.median(nn), output_type="ndarray")
        rows, cols = pairs[:, 0], pairs[:, 1]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(index), len(index)))
    n_comp, _ = connected_components(graph, directed=False)
    return n_comp == 1


def generate_garment_template(body_vertices, spec: GarmentSpec, *, regions=None, normals=None, faces=None,
                              joints=None, weights: SkinningWeights | None = None,
                              check_connected: bool = True) -> GarmentTemplate:
    """Offset the selected body vertices outward along their normals.

    Normal source, first available: explicit ``normals``, area-weighted
    normals from ``faces``, radial direction from the nearest of ``joints``.
    """
    body_vertices = np.asarray(body_vertices, dtype=np.float64)
    mask = spec.select(body_vertices, regions)
    index = np.flatnonzero(mask)
    if len(index) == 0:
        raise ValueError(f"garment {spec.name!r} selects no body vertices")
    if check_connected and not _connected(body_vertices, faces, index):
        raise ValueError(f"garment {spec.name!r} selection is not connected")
    if normals is not None:
        n = np.asarray(normals, dtype=np.float64)
    elif faces is not None:
        n = vertex_normals(body_vertices, np.asarray(faces))
    elif joints is not None:
        n = radial_normals(body_vertices, np.asarray(joints, dtype=np.float64))
    else:
        raise ValueError("garment generation needs normals, faces or joints")
    n = n[index]
    length = np.linalg.norm(n, axis=1)
    if np.any(length < 1e-12):
        bad = index[length < 1e-12]
        raise ValueError(f"zero normal at body vertex/vertices {bad[:10].tolist()}")
    n = n / length[:, None]
    verts = body_vertices[index] + (spec.layer * spec.offset) * n
    w = weights.take(index) if weights is not None else None
    if w is not None:
        w.delta[:] = 0.0
    return GarmentTemplate(spec.name, verts, index, n, spec.layer, w)


def mean_nn_spacing(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 1.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(d[:, 1].mean())


def init_gaussians_from_vertices(vertices, label: str = "", *, sh_degree: int = 1, opacity_logit: float = 0.0,
                                 weights: SkinningWeights | None = None) -> GaussianSet:
    """One isotropic, identity-oriented, half-opaque, mid-gray Gaussian per vertex."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(vertices) == 0:
        raise ValueError("cannot initialize Gaussians from an empty vertex list")
    n = len(vertices)
    label = label or "entity0"
    scale = mean_nn_spacing(vertices)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        means=vertices.copy(),
        quats=quats,
        scales_raw=np.full((n, 3), np.log(scale)),
        opacity_raw=np.full(n, float(opacity_logit)),
        sh=np.zeros((n, 3, sh_coeff_count(sh_degree))),
        labels=np.full(n, label),
        weights=None if weights is None else weights.copy(),
    )


def farthest_point_sample(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point subset indices (deterministic given ``start``)."""
    points = np.asarray(points, dtype=np.float64)
    count = min(count, len(points))
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, count):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(points - points[chosen[i]], axis=1))
    return chosen


# --- procedural capsule body -------------------------------------------------

# name, parent, rest position (y up, metres)
HUMANOID_JOINTS = (
    ("pelvis", -1, (0.0, 0.95, 0.0)),
    ("spine", 0, (0.0, 1.18, 0.0)),
    ("head", 1, (0.0, 1.50, 0.0)),
    ("l_shoulder", 1, (0.19, 1.42, 0.0)),
    ("l_elbow", 3, (0.30, 1.17, 0.0)),
    ("r_shoulder", 1, (-0.19, 1.42, 0.0)),
    ("r_elbow", 5, (-0.30, 1.17, 0.0)),
    ("l_hip", 0, (0.10, 0.90, 0.0)),
    ("l_knee", 7, (0.11, 0.50, 0.0)),
    ("r_hip", 0, (-0.10, 0.90, 0.0)),
    ("r_knee", 9, (-0.11, 0.50, 0.0)),
)

# region, joint, segment start, segment end, radius
HUMANOID_PARTS = (
    ("hips", 0, (0.0, 0.88, 0.0), (0.0, 1.05, 0.0), 0.14),
    ("torso", 1, (0.0, 1.05, 0.0), (0.0, 1.36, 0.0), 0.15),
    ("head", 2, (0.0, 1.56, 0.0), (0.0, 1.64, 0.0), 0.095),
    ("l_upper_arm", 3, (0.19, 1.40, 0.0), (0.30, 1.17, 0.0), 0.048),
    ("l_forearm", 4, (0.30, 1.17, 0.0), (0.39, 0.95, 0.0), 0.04),
    ("r_upper_arm", 5, (-0.19, 1.40, 0.0), (-0.30, 1.17, 0.0), 0.048),
    ("r_forearm", 6, (-0.30, 1.17, 0.0), (-0.39, 0.95, 0.0), 0.04),
    ("l_thigh", 7, (0.10, 0.88, 0.0), (0.11, 0.50, 0.0), 0.075),
    ("l_shin", 8, (0.11, 0.50, 0.0), (0.12, 0.10, 0.0), 0.055),
    ("r_thigh", 9, (-0.10, 0.88, 0.0), (-0.11, 0.50, 0.0), 0.075),
    ("r_shin", 10, (-0.11, 0.50, 0.0), (-0.12, 0.10, 0.0), 0.055),
)


def _segment_distance(points, a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1), closest


def _sample_capsule(rng, a, b, r, count):
    """Uniform-area samples on a capsule surface with outward normals."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    length = np.linalg.norm(b - a)
    axis = (b - a) / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    side_area = 2 * np.pi * r * length
    cap_area = 4 * np.pi * r * r
    n_side = rng.binomial(count, side_area / (side_area + cap_area))
    phi = rng.uniform(0, 2 * np.pi, n_side)
    h = rng.uniform(0, length, n_side)
    radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    side = a + h[:, None] * axis + r * radial
    sph = rng.standard_normal((count - n_side, 3))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    up = sph @ axis >= 0
    caps = np.where(up[:, None], b, a) + r * sph
    return np.concatenate([side, caps]), np.concatenate([radial, sph])


def capsule_body_template(n_vertices: int = 3000, seed: int = 0, oversample: int = 8,
                          blend_width: float = 0.05) -> BodyTemplate:
    """Humanoid made of capsules; region labels name the body parts.

    Surface samples inside another capsule are dropped, the rest are thinned
    by farthest-point sampling to ``n_vertices``. Base weights are a
    normalized Gaussian falloff of the distance to each part's bone segment.
    """
    rng = np.random.default_rng(seed)
    areas = np.array([2 * np.pi * r * np.linalg.norm(np.subtract(b, a)) + 4 * np.pi * r * r
                      for _, _, a, b, r in HUMANOID_PARTS])
    total = n_vertices * oversample
    pts, nrm, reg = [], [], []
    for (name, _, a, b, r), area in zip(HUMANOID_PARTS, areas):
        p, nvec = _sample_capsule(rng, a, b, r, max(int(total * area / areas.sum()), 8))
        pts.append(p)
        nrm.append(nvec)
        reg.append(np.full(len(p), name))
    pts, nrm, reg = np.concatenate(pts), np.concatenate(nrm), np.concatenate(reg)
    inside = np.zeros(len(pts), dtype=bool)
    for name, _, a, b, r in HUMANOID_PARTS:
        d, _ = _segment_distance(pts, a, b)
        inside |= (d < r - 1e-6) & (reg != name)
    pts, nrm, reg = pts[~inside], nrm[~inside], reg[~inside]
    keep = farthest_point_sample(pts, n_vertices, start=int(np.argmax(pts[:, 1])))
    pts, nrm, reg = pts[keep], nrm[keep], reg[keep]

    names = [j[0] for j in HUMANOID_JOINTS]
    parents = np.array([j[1] for j in HUMANOID_JOINTS])
    joints = np.array([j[2] for j in HUMANOID_JOINTS], dtype=np.float64)
    n_k = len(names)
    dist = np.full((n_k, len(pts)), np.inf)
    for name, joint, a, b, r in HUMANOID_PARTS:
        d, _ = _segment_distance(pts, a, b)
        dist[joint] = np.minimum(dist[joint], np.maximum(d - r, 0.0))
    w = np.exp(-0.5 * (dist / blend_width) ** 2)
    w[w < 1e-3 * w.max(axis=0, keepdims=True)] = 0.0
    w /= w.sum(axis=0, keepdims=True)

    # regressor: minimum-norm affine combination of the 8 nearest samples that reproduces each joint
    regressor = np.zeros((n_k, len(pts)))
    tree = cKDTree(pts)
    for j in range(n_k):
        _, idx = tree.query(joints[j], k=8)
        near = pts[idx]
        coef = np.linalg.lstsq(np.vstack([near.T, np.ones(8)]), np.append(joints[j], 1.0), rcond=None)[0]
        regressor[j, idx] = coef
    return BodyTemplate(pts, parents, regressor, w, normals=nrm, regions=reg)


def humanoid_surface_distance(points) -> np.ndarray:
    """Signed distance to the capsule union (negative inside the body)."""
    points = np.asarray(points, dtype=np.float64)
    out = np.full(len(points), np.inf)
    for _, _, a, b, r in HUMANOID_PARTS:
        d, _ = _segment_distance(points, a, b)
        out = np.minimum(out, d - r)
    return out


def humanoid_skeleton() -> Skeleton:
    return Skeleton.from_positions([j[2] for j in HUMANOID_JOINTS], [j[1] for j in HUMANOID_JOINTS],
                                   [j[0] for j in HUMANOID_JOINTS])


def humanoid_axis_points(per_part: int = 8):
    """Points along each capsule's axis, the joint that carries them, and the capsule radius.

    These serve as the dense "joint points" of the collision term: the
    direction from the nearest axis point to a surface point approximates the
    outward normal, which a handful of joint centres cannot.
    """
    pts, owner, radius = [], [], []
    t = (np.arange(per_part) + 0.5) / per_part
    for _, joint, a, b, r in HUMANOID_PARTS:
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        pts.append(a + t[:, None] * (b - a))
        owner.append(np.full(per_part, joint))
        radius.append(np.full(per_part, r))
    return np.concatenate(pts), np.concatenate(owner), np.concatenate(radius)
