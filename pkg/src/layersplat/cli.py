"""Command-line entry point.

Exit codes: 0 success, 1 usage error (bad flags, missing input files),
2 runtime failure. Progress lines go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as lio

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _existing(args, flag: str) -> Path:
    value = getattr(args, flag.lstrip("-").replace("-", "_"))
    if value is None:
        raise UsageError(f"{flag} is required")
    path = Path(value)
    if not path.exists():
        raise UsageError(f"{flag}: no such file or directory: {value}")
    return path


def _rgb(text: str):
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected R,G,B, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return parts


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_run_config(args):
    return lio.load_config(_existing(args, "--config")) if args.config else lio.RunConfig()


# --- subcommands --------------------------------------------------------------


def cmd_make_scene(args) -> int:
    from .harness import SceneSpec, make_scene
    cfg = _load_run_config(args)
    spec_kw = dict(cfg.scene)
    if args.seed is not None:
        spec_kw["seed"] = args.seed
    spec = SceneSpec(**spec_kw)
    _progress(f"building scene (seed {spec.seed})")
    scene = make_scene(spec)
    lio.save_scene(args.out, scene)
    _progress(f"wrote {len(scene.frames)} training and {len(scene.test_frames)} held-out views to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness import evaluate, initial_sets
    from .training import train_isolation, train_joint
    scene = lio.load_scene(_existing(args, "--scene"))
    cfg = _load_run_config(args)
    train = cfg.train
    if args.isolation_epochs is not None:
        train.isolation_epochs = args.isolation_epochs
    if args.joint_epochs is not None:
        train.joint_epochs = args.joint_epochs
    if args.seed is not None:
        train.seed = args.seed
    if args.log_every is not None:
        train.log_every = args.log_every
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lio.save_config(out / "config.toml", cfg)
    log_path = out / "losses.csv"
    if log_path.exists():
        log_path.unlink()

    if args.init:
        sets, _ = lio.load_checkpoint(_existing(args, "--init"))
    elif args.phase == "joint":
        raise UsageError("--phase joint needs --init with an isolation checkpoint")
    else:
        sets = initial_sets(scene, seed=train.seed + 1)
    state = None
    report = {"phase": args.phase}
    if args.phase in ("isolation", "both"):
        _progress(f"isolation: {train.isolation_epochs} epochs over {len(scene.frames)} views")
        state = train_isolation(scene, sets, train, cfg.loss, render_cfg=cfg.render, loss_log=log_path,
                                checkpoint_path=out / "isolation.ckpt", progress=sys.stderr)
        lio.save_checkpoint(out / "isolation.ckpt", state.sets, scene.skeleton)
        report["isolation"] = evaluate(state.sets, scene, config=cfg.render)
        report["isolation"]["counts"] = state.counts()
        sets = state.sets
    if args.phase in ("joint", "both"):
        _progress(f"joint: {train.joint_epochs} epochs")
        state = train_joint(scene, sets, train, cfg.loss, render_cfg=cfg.render, loss_log=log_path,
                            checkpoint_path=out / "final.ckpt", progress=sys.stderr, state=state)
        sets = state.sets
    lio.save_checkpoint(out / "final.ckpt", sets, scene.skeleton)
    final = evaluate(sets, scene, config=cfg.render)
    final["counts"] = {s.label: len(s) for s in sets}
    report["final"] = final
    lio.write_report(out / "metrics.toml", report)
    _progress(f"held-out PSNR {final['psnr']:.2f} dB, SSIM {final['ssim']:.4f}, "
              f"IoU {json.dumps({k: round(v, 3) for k, v in final['mask_iou'].items()})}")
    return EXIT_OK


def _pose_arg(args, n_joints: int):
    from .geometry import Pose
    if args.pose is None:
        return Pose.rest(n_joints)
    poses = lio.load_poses(_existing(args, "--pose"))
    if not 0 <= args.pose_index < len(poses):
        raise UsageError(f"--pose-index {args.pose_index} out of range (file has {len(poses)} poses)")
    return poses[args.pose_index]


def _ckpt_with_skeleton(args):
    sets, skel = lio.load_checkpoint(_existing(args, "--ckpt"))
    if args.skeleton:
        skel, _ = lio.load_skeleton(_existing(args, "--skeleton"))
    if skel is None:
        raise UsageError("checkpoint has no skeleton; pass --skeleton")
    return sets, skel


def cmd_render(args) -> int:
    from .harness import render_posed
    camera_path = _existing(args, "--camera")
    sets, skel = _ckpt_with_skeleton(args)
    cam = lio.load_camera(camera_path)
    pose = _pose_arg(args, skel.n_joints)
    out, _, _ = render_posed(sets, skel, pose, cam, tuple(args.background))
    lio.save_png(args.out, out.image)
    if args.alpha_dir:
        for name in out.entities:
            lio.save_mask(Path(args.alpha_dir) / f"{name}.png", out.alpha_of(name) >= 0.5)
    return EXIT_OK


def cmd_animate(args) -> int:
    from .editing import animate
    poses_path = _existing(args, "--poses")
    sets, skel = _ckpt_with_skeleton(args)
    poses = lio.load_poses(poses_path)
    cams = [lio.load_camera(_existing(argparse.Namespace(camera=c), "--camera")) for c in args.camera]
    if len(cams) not in (1, len(poses)):
        raise UsageError(f"give one --camera or one per pose ({len(poses)})")
    animate(sets, skel, poses, cams[0] if len(cams) == 1 else cams, tuple(args.background), out_dir=args.out)
    _progress(f"wrote {len(poses)} frames to {args.out}")
    return EXIT_OK


def cmd_edit_color(args) -> int:
    from .editing import edit_color
    sets, skel = lio.load_checkpoint(_existing(args, "--ckpt"))
    if args.mode == "replace":
        if (args.rgb is None) == (args.name is None):
            raise UsageError("give exactly one of --rgb or --name")
        color = args.name if args.name is not None else args.rgb
    else:
        color = None
    try:
        sets = edit_color(sets, args.entity, color, mode=args.mode, channels=args.channels)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{exc}".strip('"'))
    lio.save_checkpoint(args.out, sets, skel)
    return EXIT_OK


def cmd_transfer(args) -> int:
    from .editing import TransferConfig, replace_entity, transfer_garment
    sets, skel = lio.load_checkpoint(_existing(args, "--garment"))
    src = lio.load_template(_existing(args, "--source-body"))
    tgt = lio.load_template(_existing(args, "--target-body"))
    labels = [s.label for s in sets]
    if args.entity not in labels:
        raise UsageError(f"--entity {args.entity!r} not in checkpoint (has {labels})")
    garment = sets[labels.index(args.entity)]
    axis_points = axis_radii = None
    if args.scene:
        meta = lio.read_toml(_existing(args, "--scene") / "scene.toml")
        axis_points = np.asarray(meta["axis_points"], dtype=np.float64)
        axis_radii = np.asarray(meta["axis_radius"], dtype=np.float64) if "axis_radius" in meta else None
    moved = transfer_garment(garment, src, tgt, TransferConfig(iterations=args.iterations),
                             axis_points=axis_points, axis_radii=axis_radii)
    if args.into:
        into, into_skel = lio.load_checkpoint(_existing(args, "--into"))
        if args.entity in [s.label for s in into]:
            result = replace_entity(into, moved)
        else:
            result = list(into) + [moved]
    else:
        result, into_skel = [moved], None
    lio.save_checkpoint(args.out, result, into_skel or tgt.skeleton())
    return EXIT_OK


def _image_pairs(pred: Path, gt: Path):
    if pred.is_dir() != gt.is_dir():
        raise UsageError("--pred and --gt must both be files or both be directories")
    if not pred.is_dir():
        return [(pred, gt)]
    names = sorted(p.name for p in pred.glob("*.png"))
    missing = [n for n in names if not (gt / n).exists()]
    if missing:
        raise UsageError(f"--gt is missing {len(missing)} image(s), first: {missing[0]}")
    if not names:
        raise UsageError(f"--pred: no PNG files in {pred}")
    return [(pred / n, gt / n) for n in names]


def cmd_metrics(args) -> int:
    from .harness import psnr, render_benchmark
    from .losses import ssim
    pred = _existing(args, "--pred")
    gt = _existing(args, "--gt")
    pairs = _image_pairs(pred, gt)
    ps, ss = [], []
    for a, b in pairs:
        ia, ib = lio.load_png(a), lio.load_png(b)
        ps.append(psnr(ia, ib))
        ss.append(ssim(ia, ib))
    report = {"images": len(pairs), "psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}
    if args.benchmark:
        report["render_benchmark"] = render_benchmark()
    if args.out:
        lio.write_report(args.out, report)
    print(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(args.scenes, args.seed, include_tiled=not args.no_tiled,
                        log=_progress if args.verbose else None)
    failed = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.error / r.tolerance)
    print(f"{len(results)} checks, {len(failed)} failed; worst {worst.name}: {worst.error:.3e} "
          f"(tolerance {worst.tolerance:.0e})")
    for r in failed[:20]:
        print(f"FAIL {r.name}: {r.error:.3e} >= {r.tolerance:.0e}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_RUNTIME


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="layersplat", description="Layered articulated Gaussian splatting.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("make-scene", help="generate a synthetic scene bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_make_scene)

    s = sub.add_parser("train", help="fit Gaussians to a scene bundle")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--phase", choices=("isolation", "joint", "both"), default="both")
    s.add_argument("--config")
    s.add_argument("--init", help="starting checkpoint (required for --phase joint)")
    s.add_argument("--isolation-epochs", type=int)
    s.add_argument("--joint-epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--log-every", type=int)
    s.set_defaults(func=cmd_train)

    def posed(s):
        s.add_argument("--ckpt", required=True)
        s.add_argument("--skeleton", help="skeleton TOML, if the checkpoint has none")
        s.add_argument("--background", type=_rgb, default=[0.0, 0.0, 0.0])

    s = sub.add_parser("render", help="render a checkpoint from one camera")
    posed(s)
    s.add_argument("--camera", required=True)
    s.add_argument("--pose", help="poses JSON (rest pose if omitted)")
    s.add_argument("--pose-index", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--alpha-dir", help="also write per-entity masks here")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("animate", help="render a pose sequence")
    posed(s)
    s.add_argument("--poses", required=True)
    s.add_argument("--camera", required=True, action="append", help="repeat for one camera per pose")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_animate)

    s = sub.add_parser("edit-color", help="recolour one entity")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--entity", required=True)
    s.add_argument("--rgb", type=_rgb)
    s.add_argument("--name")
    s.add_argument("--mode", choices=("replace", "swap"), default="replace")
    s.add_argument("--channels", default="r,g", help="channel pair for --mode swap")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_edit_color)

    s = sub.add_parser("transfer", help="move a garment onto another body")
    s.add_argument("--garment", required=True, help="checkpoint holding the garment")
    s.add_argument("--entity", required=True, help="garment label inside --garment")
    s.add_argument("--source-body", required=True, help="template TOML the garment was fitted on")
    s.add_argument("--target-body", required=True, help="template TOML to move onto")
    s.add_argument("--into", help="checkpoint to insert the garment into")
    s.add_argument("--scene", help="scene bundle whose axis points define the collision joints "
                   "(default: samples along the target skeleton's bones)")
    s.add_argument("--iterations", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("metrics", help="PSNR/SSIM between rendered and reference images")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", help="write the report as TOML")
    s.add_argument("--benchmark", action="store_true", help="include a 540x540, 20k-Gaussian render timing")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--scenes", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-tiled", action="store_true")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help and friends
        return int(exc.code or 0)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
