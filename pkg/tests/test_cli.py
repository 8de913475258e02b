import numpy as np
import pytest

from layersplat.cli import main
from layersplat.io import (load_checkpoint, parse_config, read_toml, save_camera, save_checkpoint, save_config,
                           save_scene, save_template)

from oracles import Y00

SCENE = {"body_gaussians": 200, "n_views": 4, "n_test_views": 2, "image_size": 32, "focal": 50.0,
         "template_vertices": 1200,
         "garments": [{"name": "shirt", "regions": ["torso"], "layer": 2, "count": 150, "color": [0.8, 0.3, 0.2]}]}


@pytest.fixture
def ckpt(small_scene, tmp_path):
    path = tmp_path / "gt.ckpt"
    save_checkpoint(path, small_scene.gt_sets, small_scene.skeleton)
    return path


def test_edit_color_rgb(ckpt, tmp_path):
    out = tmp_path / "red.ckpt"
    assert main(["edit-color", "--ckpt", str(ckpt), "--entity", "shirt", "--rgb", "80,0,0", "--out", str(out)]) == 0
    sets, skel = load_checkpoint(out)
    dc = 0.5 + Y00 * sets[1].sh[:, :, 0]
    np.testing.assert_allclose(dc, np.tile([80 / 255, 0, 0], (len(dc), 1)), atol=1e-6)
    assert skel is not None


def test_edit_color_usage_errors(ckpt, tmp_path, capsys):
    out = str(tmp_path / "o.ckpt")
    assert main(["edit-color", "--ckpt", str(ckpt), "--entity", "hat", "--rgb", "1,2,3", "--out", out]) == 1
    assert main(["edit-color", "--ckpt", str(ckpt), "--entity", "shirt", "--out", out]) == 1
    assert main(["edit-color", "--ckpt", str(ckpt), "--entity", "shirt", "--rgb", "1,2", "--out", out]) == 1
    assert "hat" in capsys.readouterr().err


def test_render_missing_camera_names_flag(ckpt, tmp_path, capsys):
    rc = main(["render", "--ckpt", str(ckpt), "--camera", str(tmp_path / "nope.toml"), "--out",
               str(tmp_path / "r.png")])
    assert rc == 1
    assert "--camera" in capsys.readouterr().err


def test_render_writes_image_and_masks(small_scene, ckpt, tmp_path):
    cam = tmp_path / "cam.toml"
    save_camera(cam, small_scene.frames[0].camera)
    out = tmp_path / "r.png"
    assert main(["render", "--ckpt", str(ckpt), "--camera", str(cam), "--out", str(out),
                 "--alpha-dir", str(tmp_path / "a")]) == 0
    assert out.exists() and sorted(p.name for p in (tmp_path / "a").iterdir()) == ["body.png", "shirt.png"]


def test_transfer_identity_via_files(small_scene, ckpt, tmp_path):
    tpl = tmp_path / "body.toml"
    save_template(tpl, small_scene.template)
    save_scene(tmp_path / "scene", small_scene)
    out = tmp_path / "moved.ckpt"
    assert main(["transfer", "--garment", str(ckpt), "--entity", "shirt", "--source-body", str(tpl),
                 "--target-body", str(tpl), "--into", str(ckpt), "--scene", str(tmp_path / "scene"),
                 "--out", str(out)]) == 0
    sets, _ = load_checkpoint(out)
    assert [s.label for s in sets] == ["body", "shirt"]
    assert np.abs(sets[1].means - small_scene.gt_sets[1].means).max() <= 1e-6
    assert sets[0].means.tobytes() == small_scene.gt_sets[0].means.tobytes()


def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == 1
    assert main(["render"]) == 1


def test_make_scene_train_and_metrics(tmp_path):
    cfg_path = tmp_path / "run.toml"
    save_config(cfg_path, parse_config({"scene": SCENE, "loss": {"patch_size": 16, "s3im_repeats": 2}}))
    scene_dir = tmp_path / "scene"
    assert main(["make-scene", "--out", str(scene_dir), "--config", str(cfg_path)]) == 0
    assert len(list((scene_dir / "images").glob("*.png"))) == 6
    run = tmp_path / "run"
    assert main(["train", "--scene", str(scene_dir), "--out", str(run), "--config", str(cfg_path),
                 "--isolation-epochs", "1", "--joint-epochs", "1"]) == 0
    report = read_toml(run / "metrics.toml")
    final = report["final"]
    assert {"psnr", "ssim", "mask_iou", "counts", "views"} <= set(final)
    assert set(final["mask_iou"]) == {"body", "shirt"}
    assert (run / "losses.csv").exists() and (run / "final.ckpt").exists() and (run / "config.toml").exists()

    # metrics on a directory of renders against the ground-truth images
    img = sorted((scene_dir / "images").glob("*.png"))[0]
    rep = tmp_path / "m.toml"
    assert main(["metrics", "--pred", str(img), "--gt", str(img), "--out", str(rep)]) == 0
    assert read_toml(rep)["images"] == 1


def test_joint_phase_requires_init(tmp_path, small_scene):
    save_scene(tmp_path / "s", small_scene)
    assert main(["train", "--scene", str(tmp_path / "s"), "--out", str(tmp_path / "r"), "--phase", "joint"]) == 1


def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck", "--scenes", "1", "--no-tiled"]) == 0
    assert "0 failed" in capsys.readouterr().out
