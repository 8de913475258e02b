"""Acceptance criteria 1-8, each at its stated tolerance.

Every test records one PASS/FAIL line (see ``conftest.record``); the lines
are repeated in the terminal summary.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from layersplat import losses as L
from layersplat.editing import TransferConfig, edit_color, transfer_garment, transfer_joints
from layersplat.gaussians import DensifyConfig
from layersplat.gradcheck import random_gaussians, run_suite
from layersplat.harness import SceneSpec, evaluate, initial_sets, make_scene, render_benchmark, render_posed
from layersplat.losses import LossWeights
from layersplat.splatting import Camera, render
from layersplat.training import TrainConfig, train_isolation, train_joint

from conftest import record, small_spec
from oracles import brute_render

ROOT = Path(__file__).resolve().parents[1]


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    results = run_suite(50, seed=0)
    elapsed = time.perf_counter() - t0
    failed = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.error / r.tolerance)
    skipped = sum(r.skipped for r in results)
    ok = not failed and elapsed < 300
    record(1, "gradient fidelity", ok,
           f"{len(results)} checks over 50 scenes, {len(failed)} failed, worst {worst.name} "
           f"{worst.error:.1e} vs {worst.tolerance:.0e}, {skipped} FD entries on discontinuities skipped, "
           f"{elapsed:.0f} s")
    assert ok, [(r.name, r.error) for r in failed[:10]]


def test_criterion_2_compositing_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(1, 201))
        g = random_gaussians(rng, n, "a", spread=0.3)
        g.labels[n // 2:] = "b"
        g.means[:, 2] += 2.0
        size = 32
        cam = Camera.look_at(rng.normal(0, 0.2, 3), [0, 0, 2.0], fx=40.0, width=size, height=size)
        bg = rng.uniform(0, 1, 3)
        out = render([g], cam, bg)
        img, ent, _ = brute_render(g.means, g.quats, g.scales, g.opacity, g.sh, list(g.labels), cam.rotation,
                                   cam.translation, cam.fx, cam.fy, cam.cx, cam.cy, size, size, bg)
        worst = max(worst, float(np.abs(out.image - img).max()), float(np.abs(out.entity_alpha - ent).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 120
    record(2, "compositing oracle", ok, f"100 scenes up to 200 Gaussians, max deviation {worst:.1e}, {elapsed:.0f} s")
    assert ok


def test_criterion_3_loss_closed_forms():
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(ROOT / "tests" / "test_losses.py")], capture_output=True, text=True, cwd=ROOT)
    examples_ok = proc.returncode == 0
    # rigid-motion invariance of the isometry term
    rng = np.random.default_rng(0)
    worst_iso = 0.0
    for _ in range(20):
        mu = rng.normal(size=(30, 3))
        A = rng.normal(size=(30, 3, 3))
        cov = A @ np.swapaxes(A, 1, 2)
        nb = L.knn_graph(mu, 5)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        t = rng.normal(size=3)
        val = L.iso_loss(mu @ q.T + t, q @ cov @ q.T, mu, cov, nb)[0]
        worst_iso = max(worst_iso, abs(val))
    vk = np.zeros((1, 3))
    vb = np.array([[1.0, 0, 0]])
    c1 = abs(L.collision_loss(vb, np.array([[0.6, 0, 0]]), vk, 0.0)[0] - 0.064)
    c2 = abs(L.collision_loss(vb, np.array([[1.05, 0, 0]]), vk, 0.1)[0] - 1.25e-4)
    ok = examples_ok and worst_iso <= 1e-9 and c1 <= 1e-12 and c2 <= 1e-12
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record(3, "loss zero-cases and closed forms", ok,
           f"loss examples: {summary}; iso rigid invariance {worst_iso:.1e}; collision hand cases "
           f"off by {c1:.1e} and {c2:.1e}")
    assert ok


@pytest.fixture(scope="module")
def acceptance_run():
    scene = make_scene(SceneSpec())
    assert [len(s) for s in scene.gt_sets] == [800, 600, 600]
    assert (len(scene.frames), len(scene.test_frames)) == (36, 6)
    init = initial_sets(scene)
    weights = LossWeights(patch_size=32, collision_radius=0.05)
    cfg = TrainConfig(isolation_epochs=300, joint_epochs=200, densify=DensifyConfig(max_gaussians=1500))
    t0 = time.perf_counter()
    iso = train_isolation(scene, init, cfg, weights)
    t_iso = time.perf_counter() - t0
    iso_metrics = evaluate(iso.sets, scene)
    iso_counts = iso.counts()
    joint = train_joint(scene, None, cfg, weights, state=iso)
    elapsed = time.perf_counter() - t0
    return scene, iso_metrics, iso_counts, joint, elapsed, t_iso


@pytest.mark.slow
def test_criterion_4_end_to_end(acceptance_run):
    scene, iso_metrics, _, joint, elapsed, t_iso = acceptance_run
    m = evaluate(joint.sets, scene)
    iou_min = min(m["mask_iou"].values())
    ok = m["psnr"] >= 30 and m["ssim"] >= 0.95 and iou_min >= 0.90 and elapsed < 1800
    ious = ", ".join(f"{k} {v:.3f}" for k, v in m["mask_iou"].items())
    record(4, "end-to-end synthetic reconstruction", ok,
           f"held-out PSNR {m['psnr']:.2f} dB, SSIM {m['ssim']:.4f}, IoU {ious}; after isolation "
           f"PSNR {iso_metrics['psnr']:.2f} dB; {elapsed / 60:.1f} min ({t_iso / 60:.1f} isolation) "
           f"on {os.cpu_count()} core(s)")
    assert ok


def _penetrating_init(scene, depth):
    sets = [s.copy() for s in scene.gt_sets]
    for g in sets[1:]:
        k = L.nearest_joint(g.means, scene.axis_points, scene.axis_radius)
        d = g.means - scene.axis_points[k]
        g.means -= depth * d / np.linalg.norm(d, axis=1, keepdims=True)
    return sets


def _collision_state(scene, sets):
    body = sets[0].means
    val, clear = 0.0, []
    for g in sets[1:]:
        val += L.collision_loss(body, g.means, scene.axis_points, 0.0, 0.05, scene.axis_radius)[0]
        clear.append(L.collision_clearance(body, g.means, scene.axis_points, 0.05, scene.axis_radius))
    return val, float(np.concatenate(clear).min())


@pytest.mark.slow
def test_criterion_5_joint_invariants(acceptance_run):
    _, _, iso_counts, joint, _, _ = acceptance_run
    counts_ok = joint.counts() == iso_counts

    scene = make_scene(small_spec())
    init = _penetrating_init(scene, 0.06)
    v0, c0 = _collision_state(scene, init)
    final = {}
    for lam in (0.0, 1.0):
        w = LossWeights(patch_size=16, s3im_repeats=2, collision=lam, collision_radius=0.05)
        cfg = TrainConfig(isolation_epochs=1, joint_epochs=30)
        st = train_joint(scene, init, cfg, w)
        assert st.counts() == {s.label: len(s) for s in init}
        final[lam] = _collision_state(scene, st.sets)
    lower = final[1.0][0] < final[0.0][0]
    clear_ok = final[1.0][1] >= 0.0
    ok = counts_ok and lower and clear_ok
    record(5, "joint-phase invariants", ok,
           f"counts constant {counts_ok}; rest-pose collision loss {v0:.2e} at init, {final[0.0][0]:.3e} with "
           f"weight 0, {final[1.0][0]:.3e} with weight 1 (strictly lower {lower}); min clearance "
           f"{c0:.4f} at init, {final[1.0][1]:.4f} with weight 1")
    assert ok


def test_criterion_6_editing(small_scene):
    from dataclasses import replace
    scene = small_scene
    sets = [replace(s, sh=s.sh[:, :, :1].copy()) for s in scene.gt_sets]
    sets = edit_color(sets, "shirt", [80, 0, 0])
    worst = 0.0
    for fr in scene.frames:
        out, _, _ = render_posed(sets[1:], scene.skeleton, fr.pose, fr.camera, (0, 0, 0))
        mask = out.alpha >= 0.5
        mean = (out.image[mask] / out.alpha[mask][:, None]).mean(axis=0)
        worst = max(worst, float(np.abs(mean * 255 - [80, 0, 0]).max()))
    color_ok = worst <= 2.0

    t = scene.template
    shirt = scene.gt_sets[1]
    same = transfer_garment(shirt, t, t, axis_points=scene.axis_points, axis_radii=scene.axis_radius)
    drift = float(np.abs(same.means - shirt.means).max())
    big = replace(t, rest_vertices=t.rest_vertices * 1.2)
    cfg = TransferConfig()
    moved = transfer_garment(shirt, t, big, cfg, axis_points=scene.axis_points, axis_radii=scene.axis_radius)
    joints, radii = transfer_joints(t, big, scene.axis_points, scene.axis_radius, cfg)
    col = L.collision_loss(big.rest_vertices, moved.means, joints, 0.0, cfg.radius, radii)[0]
    ok = color_ok and drift <= 1e-6 and col == 0.0
    record(6, "editing", ok, f"recoloured mean off by {worst:.2f}/255; identity transfer drift {drift:.1e}; "
                             f"collision after 1.2x transfer {col:.1e}")
    assert ok


_DETERMINISM = """
import sys
sys.path.insert(0, {tests!r})
import numba
from conftest import small_spec
from layersplat.harness import make_scene, initial_sets
from layersplat.losses import LossWeights
from layersplat.training import TrainConfig, train_isolation, train_joint
sc = make_scene(small_spec())
w = LossWeights(patch_size=16, s3im_repeats=2, collision_radius=0.05)
cfg = TrainConfig(isolation_epochs=2, joint_epochs=1, densify_interval=5, seed=3)
st = train_joint(sc, None, cfg, w, state=train_isolation(sc, initial_sets(sc), cfg, w))
import hashlib
h = hashlib.sha256(b"".join(a.tobytes() for s in st.sets for a in s.param_arrays().values())).hexdigest()
print(numba.get_num_threads(), repr(st.history[-1]["total"]), h)
"""


def _determinism_run(threads):
    env = dict(os.environ, NUMBA_NUM_THREADS=str(threads))
    code = _DETERMINISM.format(tests=str(ROOT / "tests"))
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, cwd=ROOT, check=True)
    n, loss, digest = out.stdout.split()
    return int(n), float(loss), digest


def test_criterion_7_determinism():
    a, b = _determinism_run(1), _determinism_run(1)
    bitwise = a == b
    m = _determinism_run(4)
    close = abs(m[1] - a[1]) <= 1e-4
    ok = bitwise and close
    record(7, "determinism", ok, f"two single-thread runs identical {bitwise}; {m[0]}-thread final loss differs by "
                                 f"{abs(m[1] - a[1]):.1e} (parameters identical {m[2] == a[2]}); "
                                 f"host has {os.cpu_count()} core(s)")
    assert ok


def test_criterion_8_render_budget():
    rep = render_benchmark(20000, 540, repeats=5)
    ok = rep["median_ms"] < 250.0
    record(8, "render budget (soft)", ok,
           f"540x540, 20000 Gaussians: median {rep['median_ms']:.0f} ms, min {rep['min_ms']:.0f} ms on "
           f"{rep['threads']} thread(s) of {os.cpu_count()} core(s); budget 250 ms on 8 threads")
    assert ok
