"""Two-phase optimization: per-entity isolation fitting, then joint composite fitting.

One iteration consumes one frame. One epoch is one pass over the training
frames in a seeded shuffled order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import losses as L
from ._rotations import normalize_quats, quat_to_matrix, quat_to_matrix_backward
from .gaussians import DensifyConfig, GaussianSet, GradAccumulator, covariance_backward, covariance_from_rotation, densify_and_prune
from .geometry import deform_backward, deform_gaussians, forward_kinematics
from .splatting import RenderConfig, render, render_backward

PARAM_KEYS = ("means", "quats", "scales_raw", "opacity_raw", "sh", "delta_weights")
TERMS = ("recon", "mask", "s3im", "greg", "iso", "col")


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient turns non-finite."""


@dataclass
class LearningRates:
    means: float = 1.6e-4
    means_final: float = 1.6e-6
    quats: float = 1e-3
    scales_raw: float = 5e-3
    opacity_raw: float = 5e-2
    sh: float = 2.5e-3
    delta_weights: float = 1e-4

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"learning rate {f.name} must be positive")

    def at(self, progress: float) -> dict:
        """Rates at phase progress in [0, 1]; the mean rate decays log-linearly."""
        p = min(max(progress, 0.0), 1.0)
        lr = {k: getattr(self, k) for k in PARAM_KEYS}
        lr["means"] = math.exp((1 - p) * math.log(self.means) + p * math.log(self.means_final))
        return lr


@dataclass
class TrainConfig:
    isolation_epochs: int = 3000
    joint_epochs: int = 2000
    densify_interval: int = 400
    lr: LearningRates = field(default_factory=LearningRates)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    seed: int = 0
    frames_per_epoch: int | None = None
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    knn_refresh: int = 100
    checkpoint_every: int = 0
    log_every: int = 0

    def __post_init__(self):
        if isinstance(self.lr, dict):
            self.lr = LearningRates(**self.lr)
        if isinstance(self.densify, dict):
            self.densify = DensifyConfig(**self.densify)
        if self.isolation_epochs < 1 or self.joint_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.densify_interval < 1 or self.knn_refresh < 1:
            raise ValueError("densify_interval and knn_refresh must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps >= 0):
            raise ValueError("invalid Adam moment parameters")
        if self.frames_per_epoch is not None and self.frames_per_epoch < 1:
            raise ValueError("frames_per_epoch must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}


# --- Adam ---------------------------------------------------------------------


@dataclass
class Moments:
    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "Moments":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})

    def take(self, origin: np.ndarray, fresh: np.ndarray) -> "Moments":
        """Re-index after densify: ``origin`` maps new rows to old, ``fresh`` rows start from zero."""
        def pick(arr, joint_major=False):
            if joint_major:
                out = arr[:, origin].copy()
                out[:, fresh] = 0.0
            else:
                out = arr[origin].copy()
                out[fresh] = 0.0
            return out
        return Moments({k: pick(a, k == "delta_weights") for k, a in self.m.items()},
                       {k: pick(a, k == "delta_weights") for k, a in self.v.items()})


def adam_step(params: dict, grads: dict, moments: Moments, lrs: dict, step: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15) -> None:
    """In-place bias-corrected Adam update; ``step`` is 1 for the first update."""
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        m = moments.m[k]
        v = moments.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lrs[k] * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainState:
    sets: list
    moments: list
    iteration: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def create(cls, sets, seed: int = 0) -> "TrainState":
        sets = [s.copy() for s in sets]
        return cls(sets, [Moments.zeros_like(s.param_arrays()) for s in sets], rng=np.random.default_rng(seed))

    def counts(self) -> dict:
        return {s.label: len(s) for s in self.sets}


# --- gradient plumbing --------------------------------------------------------


def _param_grads(gset: GaussianSet, deformed, splat, g_means_extra=None, g_cov_extra=None) -> dict:
    """Chain render (and optional observation-space) gradients back to canonical parameters."""
    g_means = splat.means
    g_cov_rot = splat.cov_rotations
    g_scales_raw = splat.scales_raw
    if g_means_extra is not None:
        g_means = g_means + g_means_extra
    if g_cov_extra is not None:
        gr, gs = covariance_backward(deformed.cov_rotations, gset.scales, g_cov_extra)
        g_cov_rot = g_cov_rot + gr
        g_scales_raw = g_scales_raw + gs * gset.scales
    g_mu, g_R, g_delta = deform_backward(deformed.cache, g_means, splat.sh_rotations, g_cov_rot)
    return {
        "means": g_mu,
        "quats": quat_to_matrix_backward(gset.quats, g_R),
        "scales_raw": g_scales_raw,
        "opacity_raw": splat.opacity_raw,
        "sh": splat.sh,
        "delta_weights": g_delta,
    }


def _add(grads: dict, extra: dict) -> None:
    for k, v in extra.items():
        grads[k] = grads[k] + v if k in grads else v


def _ndc_norm(splat, camera) -> np.ndarray:
    return splat.mean2d_norm * 0.5 * max(camera.width, camera.height)


def _check_finite(value: float, grads_per_set, where: str):
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss during {where}")
    for grads in grads_per_set:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient on {k} during {where}")


def _apply(state: TrainState, grads_per_set, lrs: dict, cfg: TrainConfig) -> None:
    state.step += 1
    for s, mom, grads in zip(state.sets, state.moments, grads_per_set):
        adam_step(s.param_arrays(), grads, mom, lrs, state.step, cfg.beta1, cfg.beta2, cfg.eps)
        # leave unit rows alone so renormalization cannot perturb a converged set
        off = np.abs(np.einsum("ij,ij->i", s.quats, s.quats) - 1.0) > 1e-12
        s.quats[off] = normalize_quats(s.quats[off])


def _s3im_rng(seed: int, iteration: int, entity: int):
    return np.random.default_rng([seed, iteration, entity])


def _image_terms(image, target, alpha, masks, weights: L.LossWeights, rng):
    """recon + mask + S3IM values with their image and alpha gradients."""
    recon, g_img = L.recon_l1(image, target)
    mask, g_alpha = L.mask_loss(alpha, masks)
    s3, g_s3 = L.s3im(image, target, weights.patch_size, weights.ssim_kernel, weights.ssim_stride,
                      weights.s3im_repeats, rng)
    g_img = g_img + weights.s3im * g_s3
    return {"recon": recon, "mask": mask, "s3im": s3}, g_img, weights.mask * g_alpha


def _frame_order(state: TrainState, n_frames: int, cfg: TrainConfig) -> np.ndarray:
    order = state.rng.permutation(n_frames)
    if cfg.frames_per_epoch is not None:
        order = order[:cfg.frames_per_epoch]
    return order


class _Logger:
    def __init__(self, path, phase: str, stream=None, every: int = 0):
        self.phase = phase
        self.file = open(path, "a", newline="") if path else None
        self.writer = None
        if self.file is not None:
            self.writer = csv.writer(self.file)
            if self.file.tell() == 0:
                self.writer.writerow(("iteration", "phase") + TERMS + ("total",))
        self.stream = stream
        self.every = every

    def row(self, state: TrainState, terms: dict, total: float):
        rec = {"iteration": state.iteration, "phase": self.phase, **{t: terms.get(t, 0.0) for t in TERMS},
               "total": total}
        state.history.append(rec)
        if self.writer is not None:
            self.writer.writerow([rec["iteration"], self.phase] + [repr(float(rec[t])) for t in TERMS]
                                 + [repr(float(total))])
        if self.stream is not None and self.every and state.iteration % self.every == 0:
            print(f"[{self.phase}] iter {state.iteration} loss {total:.5f}", file=self.stream, flush=True)

    def close(self):
        if self.file is not None:
            self.file.close()


def _maybe_checkpoint(state, cfg, checkpoint_path, skeleton):
    if checkpoint_path and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
        from .io import save_checkpoint
        save_checkpoint(checkpoint_path, state.sets, skeleton)


def _diverged(state, checkpoint_path, skeleton, exc):
    if checkpoint_path:
        from .io import save_checkpoint
        save_checkpoint(str(checkpoint_path) + ".diverged", state.sets, skeleton)
    raise TrainingDiverged(f"{exc} at iteration {state.iteration}") from exc


# --- phases -------------------------------------------------------------------


def isolation_step(state: TrainState, frame, skeleton, weights: L.LossWeights, lrs: dict, cfg: TrainConfig,
                   accums, graphs, background, render_cfg=None) -> tuple:
    """One frame: each entity deformed, rendered alone and fitted to its masked target."""
    bones = forward_kinematics(skeleton, frame.pose)
    bg = np.asarray(background, dtype=np.float64)
    all_terms, all_grads, total = [], [], 0.0
    for e, s in enumerate(state.sets):
        mask = frame.masks[e]
        target = np.where(mask[..., None], frame.image, bg)
        d = deform_gaussians(s, s.weights, bones)
        out = render([d], frame.camera, bg, render_cfg)
        terms, g_img, g_alpha = _image_terms(out.image, target, out.entity_alpha, mask[None], weights,
                                             _s3im_rng(cfg.seed, state.iteration, e))
        greg, g_reg = L.gaussian_reg_loss(s, graphs[e], weights.reg_weights, weights.reg_scale)
        terms["greg"] = greg
        splat = render_backward(out, g_img, g_alpha)[0]
        grads = _param_grads(s, d, splat)
        _add(grads, {k: weights.gaussian_reg * v for k, v in g_reg.items()})
        accums[e].add(_ndc_norm(splat, frame.camera), splat.visible)
        all_terms.append(terms)
        all_grads.append(grads)
    total = L.total_isolation(all_terms, weights)
    _check_finite(total, all_grads, "isolation")
    _apply(state, all_grads, lrs, cfg)
    summed = {t: float(sum(x.get(t, 0.0) for x in all_terms)) for t in TERMS}
    return summed, total


def train_isolation(scene, sets, config: TrainConfig, weights: L.LossWeights | None = None, *,
                    epochs: int | None = None, render_cfg: RenderConfig | None = None, loss_log=None,
                    checkpoint_path=None, progress=None, state: TrainState | None = None) -> TrainState:
    """Fit each entity separately against its masked targets, with periodic densify-and-prune.

    ``scene`` provides ``frames``, ``skeleton`` and ``spec.background``.
    """
    weights = weights or L.LossWeights()
    epochs = config.isolation_epochs if epochs is None else epochs
    state = state or TrainState.create(sets, config.seed)
    frames = scene.frames
    if any(f.masks.shape[0] != len(state.sets) for f in frames):
        raise ValueError("every frame needs one mask per entity")
    background = scene.spec.background
    accums = [GradAccumulator.zeros(len(s)) for s in state.sets]
    graphs = [L.knn_graph(s.means, weights.knn, include_self=True) for s in state.sets]
    per_epoch = len(frames) if config.frames_per_epoch is None else min(config.frames_per_epoch, len(frames))
    total_iters = max(epochs * per_epoch, 1)
    log = _Logger(loss_log, "isolation", progress, config.log_every)
    densify_rng = np.random.default_rng([config.seed, 1])
    done = 0
    try:
        for _ in range(epochs):
            for fi in _frame_order(state, len(frames), config):
                lrs = config.lr.at(done / total_iters)
                try:
                    terms, total = isolation_step(state, frames[fi], scene.skeleton, weights, lrs, config,
                                                  accums, graphs, background, render_cfg)
                except TrainingDiverged as exc:
                    _diverged(state, checkpoint_path, scene.skeleton, exc)
                state.iteration += 1
                done += 1
                log.row(state, terms, total)
                if state.iteration % config.densify_interval == 0:
                    _densify(state, accums, config, densify_rng)
                    graphs = [L.knn_graph(s.means, weights.knn, include_self=True) for s in state.sets]
                elif state.iteration % config.knn_refresh == 0:
                    graphs = [L.knn_graph(s.means, weights.knn, include_self=True) for s in state.sets]
                _maybe_checkpoint(state, config, checkpoint_path, scene.skeleton)
    finally:
        log.close()
    return state


def _densify(state: TrainState, accums, config: TrainConfig, rng) -> None:
    for e, s in enumerate(state.sets):
        new, origin = densify_and_prune(s, accums[e], config.densify, rng)
        fresh = np.zeros(len(new), dtype=bool)
        fresh[np.flatnonzero(origin < 0)] = True
        src = np.where(origin < 0, -origin - 1, origin)
        state.moments[e] = state.moments[e].take(src, fresh)
        state.sets[e] = new
        accums[e].reset(len(new))
    state.history.append({"iteration": state.iteration, "phase": "densify", "counts": state.counts()})


def joint_step(state: TrainState, frame, skeleton, weights: L.LossWeights, lrs: dict, cfg: TrainConfig,
               graphs, axis_points, axis_owner, background, body_index: int = 0, render_cfg=None,
               axis_radius=None) -> tuple:
    """One frame: all entities composited, with isometry and collision regularizers."""
    bones = forward_kinematics(skeleton, frame.pose)
    bg = np.asarray(background, dtype=np.float64)
    deformed = [deform_gaussians(s, s.weights, bones) for s in state.sets]
    out = render(deformed, frame.camera, bg, render_cfg)
    labels = [s.label for s in state.sets]
    alpha = np.stack([out.alpha_of(lb) if lb in out.entities else np.zeros(frame.masks.shape[1:]) for lb in labels])
    terms, g_img, g_alpha_sets = _image_terms(out.image, frame.image, alpha, frame.masks, weights,
                                              _s3im_rng(cfg.seed, state.iteration, 0))
    g_alpha = np.zeros((len(out.entities),) + alpha.shape[1:])
    for i, lb in enumerate(labels):
        if lb in out.entities:
            g_alpha[out.entities.index(lb)] += g_alpha_sets[i]
    splats = render_backward(out, g_img, g_alpha)

    g_mu_extra = [np.zeros_like(d.means) for d in deformed]
    g_cov_extra = [np.zeros((len(d), 3, 3)) for d in deformed]
    greg_total, iso_total, col_total = 0.0, 0.0, 0.0
    reg_grads, canon_grads = [], []
    for e, (s, d) in enumerate(zip(state.sets, deformed)):
        greg, g_reg = L.gaussian_reg_loss(s, graphs[e], weights.reg_weights, weights.reg_scale)
        greg_total += greg
        reg_grads.append(g_reg)
        R0 = quat_to_matrix(s.quats)
        ref_cov = covariance_from_rotation(R0, s.scales)
        cov = covariance_from_rotation(d.cov_rotations, s.scales)
        iso, gm, gc, gm0, gc0 = L.iso_loss(d.means, cov, s.means, ref_cov, graphs[e][:, 1:], weights.iso_mu,
                                           weights.iso_sigma, with_reference=True)
        iso_total += iso
        g_mu_extra[e] += weights.iso * gm
        g_cov_extra[e] += weights.iso * gc
        # the canonical side of the isometry term is learned as well
        gR0, gs0 = covariance_backward(R0, s.scales, weights.iso * gc0)
        canon_grads.append({"means": weights.iso * gm0, "quats": quat_to_matrix_backward(s.quats, gR0),
                            "scales_raw": gs0 * s.scales})

    if weights.collision > 0 and axis_points is not None:
        joints = np.einsum("nij,nj->ni", bones[axis_owner][:, :3, :3], axis_points) + bones[axis_owner][:, :3, 3]
        body = deformed[body_index].means
        for e, d in enumerate(deformed):
            if e == body_index:
                continue
            col, gb, gg = L.collision_loss(body, d.means, joints, weights.collision_margin, weights.collision_radius,
                                           axis_radius)
            col_total += col
            g_mu_extra[body_index] += weights.collision * gb
            g_mu_extra[e] += weights.collision * gg

    all_grads = []
    for e, (s, d, sp) in enumerate(zip(state.sets, deformed, splats)):
        grads = _param_grads(s, d, sp, g_mu_extra[e], g_cov_extra[e])
        _add(grads, {k: weights.gaussian_reg * v for k, v in reg_grads[e].items()})
        _add(grads, canon_grads[e])
        all_grads.append(grads)
    terms.update(greg=greg_total, iso=iso_total, col=col_total)
    total = L.total_joint(terms, weights)
    _check_finite(total, all_grads, "joint")
    _apply(state, all_grads, lrs, cfg)
    return terms, total


def train_joint(scene, sets, config: TrainConfig, weights: L.LossWeights | None = None, *,
                epochs: int | None = None, render_cfg: RenderConfig | None = None, loss_log=None,
                checkpoint_path=None, progress=None, state: TrainState | None = None,
                body_label: str = "body") -> TrainState:
    """Composite fitting of all entities; Gaussian counts stay fixed."""
    weights = weights or L.LossWeights()
    epochs = config.joint_epochs if epochs is None else epochs
    if state is None:
        state = TrainState.create(sets, config.seed + 1)
    else:
        # fresh optimizer state for the new phase
        state = TrainState(state.sets, [Moments.zeros_like(s.param_arrays()) for s in state.sets],
                           state.iteration, 0, state.history, np.random.default_rng(config.seed + 1))
    frames = scene.frames
    labels = [s.label for s in state.sets]
    body_index = labels.index(body_label) if body_label in labels else 0
    counts = [len(s) for s in state.sets]
    graphs = [L.knn_graph(s.means, weights.knn, include_self=True) for s in state.sets]
    axis_points = getattr(scene, "axis_points", None)
    axis_owner = getattr(scene, "axis_owner", None)
    axis_radius = getattr(scene, "axis_radius", None)
    per_epoch = len(frames) if config.frames_per_epoch is None else min(config.frames_per_epoch, len(frames))
    total_iters = max(epochs * per_epoch, 1)
    log = _Logger(loss_log, "joint", progress, config.log_every)
    done = 0
    try:
        for _ in range(epochs):
            for fi in _frame_order(state, len(frames), config):
                lrs = config.lr.at(done / total_iters)
                try:
                    terms, total = joint_step(state, frames[fi], scene.skeleton, weights, lrs, config, graphs,
                                              axis_points, axis_owner, scene.spec.background, body_index, render_cfg,
                                              axis_radius)
                except TrainingDiverged as exc:
                    _diverged(state, checkpoint_path, scene.skeleton, exc)
                state.iteration += 1
                done += 1
                log.row(state, terms, total)
                _maybe_checkpoint(state, config, checkpoint_path, scene.skeleton)
    finally:
        log.close()
    assert [len(s) for s in state.sets] == counts
    return state


def smoothed(values, window: int = 100) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    c = np.cumsum(np.insert(values, 0, 0.0))
    return (c[window:] - c[:-window]) / window
