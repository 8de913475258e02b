"""Fit body and garment Gaussians to a synthetic multi-view capture.

Run from the repository root:  python demos/02_train_synthetic.py
Takes a few minutes on one core. The acceptance run uses the full
800 + 2 x 600 scene and far more epochs (see tests/test_acceptance.py).
"""

from pathlib import Path

from layersplat.harness import GarmentDef, SceneSpec, evaluate, initial_sets, make_scene, render_posed
from layersplat.io import save_checkpoint, save_png
from layersplat.losses import LossWeights
from layersplat.training import TrainConfig, train_isolation, train_joint

out_dir = Path("demo_out/train")
out_dir.mkdir(parents=True, exist_ok=True)

shirt = GarmentDef("shirt", ("torso", "l_upper_arm", "r_upper_arm"), 2, 300, (0.80, 0.30, 0.22))
spec = SceneSpec(body_gaussians=400, garments=(shirt,), n_views=12, n_test_views=2, image_size=48, focal=75.0,
                 template_vertices=1500)
scene = make_scene(spec)

# Start from jittered copies of the template surface, all mid-gray.
init = initial_sets(scene)
print("initial held-out PSNR: {psnr:.2f} dB".format(**evaluate(init, scene)))

weights = LossWeights(patch_size=16, s3im_repeats=4, collision_radius=0.05)
config = TrainConfig(isolation_epochs=40, joint_epochs=20, densify_interval=120)

# Phase one fits each entity against its own masked images.
state = train_isolation(scene, init, config, weights, loss_log=out_dir / "losses.csv")
m = evaluate(state.sets, scene)
print(f"after isolation: PSNR {m['psnr']:.2f} dB, counts {state.counts()}")

# Phase two renders everything together and adds the isometry and collision
# terms. Counts stay fixed from here on.
state = train_joint(scene, None, config, weights, state=state, loss_log=out_dir / "losses.csv")
m = evaluate(state.sets, scene)
print(f"after joint:     PSNR {m['psnr']:.2f} dB, SSIM {m['ssim']:.3f}, IoU {m['mask_iou']}")

save_checkpoint(out_dir / "final.ckpt", state.sets, scene.skeleton)
fr = scene.test_frames[0]
pred, _, _ = render_posed(state.sets, scene.skeleton, fr.pose, fr.camera)
save_png(out_dir / "heldout_pred.png", pred.image)
save_png(out_dir / "heldout_gt.png", fr.image)
print("checkpoint, loss log and a held-out comparison written to", out_dir)
