import struct

import numpy as np
import pytest

from layersplat.gradcheck import random_gaussians, random_weights
from layersplat.io import (VERSION, CheckpointError, RunConfig, decode_checkpoint, dump_config, encode_checkpoint,
                           load_camera, load_checkpoint, load_config, load_png, load_poses, load_scene,
                           load_skeleton, load_template, parse_config, save_camera, save_checkpoint, save_config,
                           save_png, save_poses, save_scene, save_skeleton, save_template, srgb_to_linear)
from layersplat.losses import LossWeights
from layersplat.training import TrainConfig


def sample_sets(seed=0):
    rng = np.random.default_rng(seed)
    a, b = random_gaussians(rng, 7, "body"), random_gaussians(rng, 4, "shirt")
    a.weights, b.weights = random_weights(rng, 3, 7), random_weights(rng, 3, 4)
    return a, b


def test_checkpoint_round_trip_bitwise(small_scene, tmp_path):
    sets = list(sample_sets())
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, sets, small_scene.skeleton)
    back, skel = load_checkpoint(path)
    for s, t in zip(sets, back):
        for k in s.param_arrays():
            assert s.param_arrays()[k].tobytes() == t.param_arrays()[k].tobytes()
        assert np.array_equal(s.labels, t.labels)
    assert np.array_equal(skel.parents, small_scene.skeleton.parents)
    assert skel.rest_local.tobytes() == small_scene.skeleton.rest_local.tobytes()
    # re-encoding is byte-identical
    assert encode_checkpoint(back, skel) == path.read_bytes()


def test_checkpoint_without_weights_or_skeleton():
    rng = np.random.default_rng(1)
    g = random_gaussians(rng, 3, "x")
    sets, skel = decode_checkpoint(encode_checkpoint([g]))
    assert skel is None and sets[0].weights is None and sets[0].means.tobytes() == g.means.tobytes()


def test_truncated_checkpoint_is_rejected():
    data = encode_checkpoint(list(sample_sets()))
    for cut in (4, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:cut])


def test_corrupted_checkpoint_is_rejected():
    data = bytearray(encode_checkpoint(list(sample_sets())))
    data[100] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(data))


def test_future_version_is_rejected():
    data = bytearray(encode_checkpoint(list(sample_sets())))
    data[8:12] = struct.pack("<I", VERSION + 1)
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bytes(data))


def test_failed_write_leaves_previous_file(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, list(sample_sets()))
    before = path.read_bytes()
    with pytest.raises(ValueError):
        save_checkpoint(path, [])
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]


def test_config_round_trip(tmp_path):
    cfg = parse_config({"train": {"isolation_epochs": 12, "lr": {"sh": 0.01}, "densify": {"max_gaussians": 99}},
                        "loss": {"collision_radius": 0.05, "patch_size": 32},
                        "render": {"cutoff_sigma": float("inf")}, "paths": {"scene": "s"}})
    path = tmp_path / "run.toml"
    save_config(path, cfg)
    back = load_config(path)
    assert back == cfg
    assert dump_config(back) == dump_config(cfg)
    assert back.train.lr.sh == 0.01 and back.train.densify.max_gaussians == 99


def test_config_defaults_and_unknown_keys():
    cfg = parse_config({})
    assert cfg.train == TrainConfig() and cfg.loss == LossWeights()
    with pytest.raises(ValueError, match="unknown"):
        parse_config({"train": {"epochs": 3}})
    with pytest.raises(ValueError, match="unknown"):
        parse_config({"optimizer": {}})
    assert isinstance(RunConfig(), RunConfig)


def test_descriptor_round_trips(small_scene, tmp_path):
    cam = small_scene.frames[0].camera
    save_camera(tmp_path / "c.toml", cam)
    c2 = load_camera(tmp_path / "c.toml")
    assert np.array_equal(c2.rotation, cam.rotation) and np.array_equal(c2.translation, cam.translation)
    assert (c2.fx, c2.cx, c2.width) == (cam.fx, cam.cx, cam.width)

    save_skeleton(tmp_path / "s.toml", small_scene.skeleton)
    sk, w = load_skeleton(tmp_path / "s.toml")
    assert w is None and np.array_equal(sk.rest_local, small_scene.skeleton.rest_local)

    poses = [f.pose for f in small_scene.frames[:3]]
    save_poses(tmp_path / "p.json", poses)
    for a, b in zip(poses, load_poses(tmp_path / "p.json")):
        assert np.array_equal(a.joint_rotations, b.joint_rotations)

    save_template(tmp_path / "t.toml", small_scene.template)
    t = load_template(tmp_path / "t.toml")
    assert np.array_equal(t.rest_vertices, small_scene.template.rest_vertices)
    assert np.array_equal(t.base_weights, small_scene.template.base_weights)


def test_png_quantization(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 6, 3))
    save_png(tmp_path / "i.png", img)
    back = load_png(tmp_path / "i.png")
    assert back.shape == img.shape
    # one 8-bit sRGB level is at most about 1/255 * 12.92 in linear units near black
    assert np.abs(back - img).max() < 0.05
    levels = srgb_to_linear(np.arange(256) / 255.0)
    assert np.all(np.isin(back, levels))


def test_scene_bundle_round_trip(small_scene, tmp_path):
    save_scene(tmp_path, small_scene)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["cameras", "gt.ckpt", "images", "masks", "poses.json", "scene.toml"]
    assert sorted(p.name for p in (tmp_path / "masks").iterdir()) == ["body", "shirt"]
    sc = load_scene(tmp_path)
    assert sc.spec == small_scene.spec
    assert len(sc.frames) == len(small_scene.frames) and len(sc.test_frames) == len(small_scene.test_frames)
    for a, b in zip(sc.frames + sc.test_frames, small_scene.frames + small_scene.test_frames):
        assert np.array_equal(a.masks, b.masks)
        assert np.array_equal(a.pose.joint_rotations, b.pose.joint_rotations)
        assert np.abs(a.image - b.image).max() < 0.05
    for s, t in zip(sc.gt_sets, small_scene.gt_sets):
        assert s.means.tobytes() == t.means.tobytes()
    assert np.array_equal(sc.axis_points, small_scene.axis_points)
