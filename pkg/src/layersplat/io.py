"""Persistence: binary checkpoints, TOML configs and descriptors, PNG images, scene bundles.

Byte-level layouts are documented in ``docs/formats.md``. Every writer goes
through a temporary file in the destination directory followed by
``os.replace``, so a crash never leaves a half-written file under the final
name.
"""

from __future__ import annotations

import json
from io import BytesIO
import os
import struct
import sys
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli_w
from PIL import Image

from .gaussians import DensifyConfig, GaussianSet
from .geometry import Pose, Skeleton, SkinningWeights
from .losses import LossWeights
from .splatting import Camera, RenderConfig
from .training import LearningRates, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MAGIC = b"LSPLATCK"
VERSION = 1
FLAG_WEIGHTS = 1
FLAG_SKELETON = 2


class CheckpointError(ValueError):
    """Malformed, truncated, corrupted or unsupported checkpoint."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- checkpoint ---------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def encode_checkpoint(sets, skeleton: Skeleton | None = None) -> bytes:
    sets = list(sets)
    if not sets:
        raise ValueError("nothing to save: no Gaussian sets")
    n_coef = {s.sh.shape[2] for s in sets}
    if len(n_coef) != 1:
        raise ValueError("all sets in one checkpoint must share the SH degree")
    n_coef = n_coef.pop()
    degree = sets[0].sh_degree
    has_w = all(s.weights is not None for s in sets)
    if any(s.weights is not None for s in sets) and not has_w:
        raise ValueError("either every set carries skinning weights or none does")
    n_k = sets[0].weights.n_joints if has_w else 0
    flags = (FLAG_WEIGHTS if has_w else 0) | (FLAG_SKELETON if skeleton is not None else 0)
    total = sum(len(s) for s in sets)

    out = bytearray(MAGIC)
    out += struct.pack("<IIQIII", VERSION, flags, total, degree, len(sets), n_k)
    for s in sets:
        out += _pack_str(s.label) + struct.pack("<Q", len(s))
    for attr in ("means", "quats", "scales_raw", "opacity_raw", "sh"):
        for s in sets:
            out += np.ascontiguousarray(getattr(s, attr), dtype="<f8").tobytes()
    if has_w:
        for part in ("base", "delta"):
            for s in sets:
                out += np.ascontiguousarray(getattr(s.weights, part).T, dtype="<f8").tobytes()
    if skeleton is not None:
        out += struct.pack("<I", skeleton.n_joints)
        out += np.asarray(skeleton.parents, dtype="<i4").tobytes()
        out += np.ascontiguousarray(skeleton.rest_local[:, :3, :], dtype="<f8").tobytes()
        names = list(skeleton.names) or [""] * skeleton.n_joints
        for name in names:
            out += _pack_str(name)
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.data)}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape, dtype="<f8"):
        count = int(np.prod(shape))
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def decode_checkpoint(data: bytes):
    """Returns ``(sets, skeleton_or_None)``."""
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, flags, total, degree, n_ent, n_k = r.unpack("<IIQIII")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads version {VERSION})")
    if len(data) < 4 or struct.unpack("<I", data[-4:])[0] != (zlib.crc32(data[:-4]) & 0xFFFFFFFF):
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    table = [(r.string(), r.unpack("<Q")[0]) for _ in range(n_ent)]
    if sum(c for _, c in table) != total:
        raise CheckpointError("entity table does not add up to the Gaussian count")
    n_coef = (degree + 1) ** 2
    shapes = {"means": (3,), "quats": (4,), "scales_raw": (3,), "opacity_raw": (), "sh": (3, n_coef)}
    arrays = {k: [r.array((c,) + shp) for _, c in table] for k, shp in shapes.items()}
    weights = [None] * n_ent
    if flags & FLAG_WEIGHTS:
        base = [r.array((c, n_k)).T for _, c in table]
        delta = [r.array((c, n_k)).T for _, c in table]
        weights = [SkinningWeights(np.ascontiguousarray(b), np.ascontiguousarray(d)) for b, d in zip(base, delta)]
    skeleton = None
    if flags & FLAG_SKELETON:
        (nj,) = r.unpack("<I")
        parents = r.array((nj,), "<i4").astype(np.int64)
        top = r.array((nj, 3, 4))
        rest = np.tile(np.eye(4), (nj, 1, 1))
        rest[:, :3, :] = top
        names = tuple(r.string() for _ in range(nj))
        skeleton = Skeleton(parents, rest, names if any(names) else ())
    if r.pos != len(data) - 4:
        raise CheckpointError("unexpected trailing bytes in checkpoint")
    sets = [GaussianSet(arrays["means"][i], arrays["quats"][i], arrays["scales_raw"][i], arrays["opacity_raw"][i],
                        arrays["sh"][i], np.full(c, label), weights[i]) for i, (label, c) in enumerate(table)]
    return sets, skeleton


def save_checkpoint(path, sets, skeleton: Skeleton | None = None) -> None:
    atomic_write(path, encode_checkpoint(sets, skeleton))


def load_checkpoint(path):
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    return decode_checkpoint(data)


# --- small TOML descriptors ---------------------------------------------------


def read_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def write_toml(path, data: dict) -> None:
    atomic_write(path, tomli_w.dumps(data).encode("utf-8"))


def camera_to_dict(cam: Camera) -> dict:
    return {
        "extrinsic": [float(x) for x in cam.extrinsic[:3].reshape(-1)],
        "fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
        "width": int(cam.width), "height": int(cam.height), "near": float(cam.near),
    }


def camera_from_dict(d: dict) -> Camera:
    E = np.asarray(d["extrinsic"], dtype=np.float64)
    if E.size not in (12, 16):
        raise ValueError("camera extrinsic needs 12 or 16 row-major values")
    M = np.eye(4)
    M[:3] = E[:12].reshape(3, 4)
    return Camera.from_extrinsic(M, d["fx"], d.get("fy", d["fx"]), d["cx"], d["cy"], d["width"], d["height"],
                                 d.get("near", 0.01))


def save_camera(path, cam: Camera) -> None:
    write_toml(path, {"camera": camera_to_dict(cam)})


def load_camera(path) -> Camera:
    return camera_from_dict(read_toml(path)["camera"])


def skeleton_to_dict(skel: Skeleton, weights: SkinningWeights | None = None) -> dict:
    d = {
        "parents": [int(p) for p in skel.parents],
        "rest": [[float(x) for x in m[:3].reshape(-1)] for m in skel.rest_local],
    }
    if skel.names:
        d["names"] = list(skel.names)
    if weights is not None:
        d["weights"] = weights.base.tolist()
    return {"skeleton": d}


def skeleton_from_dict(d: dict):
    s = d["skeleton"]
    rest = np.tile(np.eye(4), (len(s["parents"]), 1, 1))
    rest[:, :3, :] = np.asarray(s["rest"], dtype=np.float64).reshape(-1, 3, 4)
    skel = Skeleton(s["parents"], rest, tuple(s.get("names", ())))
    w = SkinningWeights(np.asarray(s["weights"], dtype=np.float64)) if "weights" in s else None
    return skel, w


def save_skeleton(path, skel: Skeleton, weights: SkinningWeights | None = None) -> None:
    write_toml(path, skeleton_to_dict(skel, weights))


def load_skeleton(path):
    return skeleton_from_dict(read_toml(path))


def save_template(path, template) -> None:
    d = {
        "rest_vertices": template.rest_vertices.tolist(),
        "parents": template.parents.tolist(),
        "joint_regressor": template.joint_regressor.tolist(),
        "base_weights": template.base_weights.tolist(),
    }
    if template.shape_basis.shape[2]:
        d["shape_basis"] = template.shape_basis.tolist()
    if np.any(template.pose_basis):
        d["pose_basis"] = template.pose_basis.tolist()
    if np.any(template.offsets):
        d["offsets"] = template.offsets.tolist()
    for opt in ("faces", "normals", "regions"):
        v = getattr(template, opt)
        if v is not None:
            d[opt] = v.tolist()
    write_toml(path, {"template": d})


def load_template(path):
    from .templates import BodyTemplate
    d = read_toml(path)["template"]
    kwargs = {k: np.asarray(v) for k, v in d.items()}
    if "faces" in kwargs:
        kwargs["faces"] = kwargs["faces"].astype(np.int64)
    return BodyTemplate(**kwargs)


def poses_to_json(poses) -> str:
    return json.dumps({"poses": [{"root_translation": p.root_translation.tolist(),
                                  "joint_rotations": p.joint_rotations.tolist()} for p in poses]}, indent=1)


def poses_from_json(text: str) -> list:
    data = json.loads(text)
    items = data["poses"] if isinstance(data, dict) else data
    return [Pose(np.asarray(p["root_translation"], float), np.asarray(p["joint_rotations"], float)) for p in items]


def save_poses(path, poses) -> None:
    atomic_write(path, poses_to_json(poses).encode("utf-8"))


def load_poses(path) -> list:
    return poses_from_json(Path(path).read_text())


# --- images -------------------------------------------------------------------


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def encode_png(image) -> bytes:
    arr = np.round(linear_to_srgb(image) * 255.0).astype(np.uint8)
    buf = BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def save_png(path, image) -> None:
    """Linear [0, 1] RGB to an 8-bit sRGB PNG."""
    atomic_write(path, encode_png(image))


def load_png(path) -> np.ndarray:
    """8-bit sRGB PNG to linear float RGB."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr)


def save_mask(path, mask) -> None:
    buf = BytesIO()
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8), mode="L").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


# --- run config ---------------------------------------------------------------


@dataclass
class RunConfig:
    scene: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    render: RenderConfig = field(default_factory=RenderConfig)
    paths: dict = field(default_factory=dict)


_SECTIONS = {"scene", "train", "loss", "render", "paths"}


def _checked(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return cls(**data)


def parse_config(data: dict) -> RunConfig:
    unknown = set(data) - _SECTIONS
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    train = dict(data.get("train", {}))
    if "lr" in train:
        train["lr"] = _checked(LearningRates, train["lr"], "train.lr")
    if "densify" in train:
        train["densify"] = _checked(DensifyConfig, train["densify"], "train.densify")
    render = dict(data.get("render", {}))
    return RunConfig(
        scene=dict(data.get("scene", {})),
        train=_checked(TrainConfig, train, "train"),
        loss=LossWeights.from_dict(dict(data.get("loss", {}))),
        render=_checked(RenderConfig, render, "render"),
        paths=dict(data.get("paths", {})),
    )


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, (list, tuple)):
        return [_drop_none(v) for v in d]
    if isinstance(d, float) and not np.isfinite(d):
        return str(d)
    return d


def config_to_dict(cfg: RunConfig) -> dict:
    render = asdict(cfg.render)
    return _drop_none({
        "scene": cfg.scene,
        "train": asdict(cfg.train),
        "loss": asdict(cfg.loss),
        "render": render,
        "paths": cfg.paths,
    })


def load_config(path) -> RunConfig:
    data = read_toml(path)
    if "render" in data:
        for k, v in data["render"].items():
            if isinstance(v, str) and v in ("inf", "-inf", "nan"):
                data["render"][k] = float(v)
    return parse_config(data)


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def save_config(path, cfg: RunConfig) -> None:
    atomic_write(path, dump_config(cfg).encode("utf-8"))


# --- scene bundle -------------------------------------------------------------


def scene_spec_to_dict(spec) -> dict:
    d = asdict(spec)
    d["garments"] = [asdict(g) for g in spec.garments]
    return _drop_none(d)


def save_scene(root, scene) -> None:
    """Write a scene bundle: scene.toml, poses.json, cameras/, images/, masks/<entity>/, gt.ckpt."""
    root = Path(root)
    frames = scene.frames + scene.test_frames
    meta = {
        "format": "layersplat-scene",
        "version": VERSION,
        "spec": scene_spec_to_dict(scene.spec),
        "entities": list(scene.entities),
        "n_train": len(scene.frames),
        "n_test": len(scene.test_frames),
        "axis_points": scene.axis_points.tolist(),
        "axis_owner": scene.axis_owner.tolist(),
    }
    if scene.axis_radius is not None:
        meta["axis_radius"] = scene.axis_radius.tolist()
    write_toml(root / "scene.toml", meta)
    save_poses(root / "poses.json", [f.pose for f in frames])
    for i, fr in enumerate(frames):
        save_camera(root / "cameras" / f"{i:04d}.toml", fr.camera)
        save_png(root / "images" / f"{i:04d}.png", fr.image)
        for e, name in enumerate(scene.entities):
            save_mask(root / "masks" / name / f"{i:04d}.png", fr.masks[e])
    save_checkpoint(root / "gt.ckpt", scene.gt_sets, scene.skeleton)


def load_scene(root):
    """Read a scene bundle. Images come back quantized to 8 bits and linearized."""
    from .harness import Frame, SceneSpec, SyntheticScene
    root = Path(root)
    meta = read_toml(root / "scene.toml")
    if meta.get("format") != "layersplat-scene":
        raise ValueError(f"{root} is not a scene bundle")
    if meta.get("version") != VERSION:
        raise ValueError(f"unsupported scene bundle version {meta.get('version')}")
    spec = SceneSpec(**meta["spec"])
    gt_sets, skeleton = load_checkpoint(root / "gt.ckpt")
    poses = load_poses(root / "poses.json")
    entities = meta["entities"]
    frames = []
    for i, pose in enumerate(poses):
        cam = load_camera(root / "cameras" / f"{i:04d}.toml")
        img = load_png(root / "images" / f"{i:04d}.png")
        masks = np.stack([load_mask(root / "masks" / name / f"{i:04d}.png") for name in entities])
        frames.append(Frame(img, masks, cam, pose))
    n = meta["n_train"]
    return SyntheticScene(spec, skeleton, gt_sets, frames[:n], frames[n:],
                          np.asarray(meta["axis_points"], dtype=np.float64),
                          np.asarray(meta["axis_owner"], dtype=np.int64),
                          np.asarray(meta["axis_radius"], dtype=np.float64) if "axis_radius" in meta else None)


def write_report(path, report: dict) -> None:
    write_toml(path, _drop_none(report))
