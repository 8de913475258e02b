"""Finite-difference checks of every analytic gradient in the package.

Each check builds a small seeded random instance, evaluates a scalar
function of the outputs, and compares the analytic gradient with central
differences. The error of one array is ``max|a - n| / max(max|n|, floor)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses
from ._rotations import axis_angle_to_matrix, quat_to_matrix_backward
from .gaussians import GaussianSet
from .geometry import SkinningWeights, deform_backward, deform_gaussians
from .splatting import Camera, RenderConfig, render, render_backward

DEFAULT_STEP = 1e-4
ERROR_FLOOR = 1e-6

# smooth rasterizer settings: no footprint cutoff and no transmittance early exit
SMOOTH = RenderConfig(cutoff_sigma=np.inf, min_transmittance=0.0)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)


def relative_error(analytic, numeric, floor: float = ERROR_FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / max(np.max(np.abs(numeric), initial=0.0), floor))


def central_difference(f, x: np.ndarray, h: float = DEFAULT_STEP, valid=None):
    """Numeric gradient of ``f()`` w.r.t. the array ``x`` (perturbed in place and restored).

    ``valid(state_plus, state_minus)``, if given, receives the second return
    value of ``f`` at both points; entries where it returns False are masked.
    Returns ``(grad, mask)``.
    """
    grad = np.zeros_like(x)
    mask = np.ones(x.shape, dtype=bool)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        if valid is not None:
            fp, sp = fp
            fm, sm = fm
            mask[idx] = valid(sp, sm)
        grad[idx] = (fp - fm) / (2 * h)
    return grad, mask


def random_gaussians(rng: np.random.Generator, n: int, label="g", sh_degree: int = 1,
                     spread: float = 0.4, max_opacity: float = 0.9) -> GaussianSet:
    c = (sh_degree + 1) ** 2
    sh = rng.normal(0, 0.1, (n, 3, c))
    sh[:, :, 0] = rng.uniform(0.5, 1.5, (n, 3))
    op = rng.uniform(0.1, max_opacity, n)
    q = rng.normal(size=(n, 4))
    return GaussianSet(
        rng.normal(0, spread, (n, 3)),
        q / np.linalg.norm(q, axis=1, keepdims=True),
        np.log(rng.uniform(0.06, 0.25, (n, 3))),
        np.log(op) - np.log1p(-op),
        sh,
        np.full(n, label),
    )


def random_bones(rng: np.random.Generator, n_k: int, angle: float = 0.6, shift: float = 0.2) -> np.ndarray:
    bones = np.tile(np.eye(4), (n_k, 1, 1))
    bones[:, :3, :3] = axis_angle_to_matrix(rng.normal(0, angle, (n_k, 3)))
    bones[:, :3, 3] = rng.normal(0, shift, (n_k, 3))
    return bones


def random_weights(rng: np.random.Generator, n_k: int, n: int, delta: float = 0.05) -> SkinningWeights:
    base = rng.uniform(0.0, 1.0, (n_k, n))
    base /= base.sum(axis=0, keepdims=True)
    return SkinningWeights(base, rng.normal(0, delta, (n_k, n)))


def check_deform(seed: int, n: int = 12, n_k: int = 3, h: float = DEFAULT_STEP, tol: float = 1e-4) -> list:
    rng = np.random.default_rng(seed)
    g = random_gaussians(rng, n)
    w = random_weights(rng, n_k, n)
    bones = random_bones(rng, n_k)
    wm, wr, wu = rng.normal(size=(n, 3)), rng.normal(size=(n, 3, 3)), rng.normal(size=(n, 3, 3))

    def f():
        d = deform_gaussians(g, w, bones)
        return float(np.sum(wm * d.means) + np.sum(wr * d.rotations) + np.sum(wu * d.cov_rotations))

    d = deform_gaussians(g, w, bones)
    g_mu, g_R, g_delta = deform_backward(d.cache, wm, wr, wu)
    analytic = {"means": g_mu, "quats": quat_to_matrix_backward(g.quats, g_R), "delta_weights": g_delta}
    targets = {"means": g.means, "quats": g.quats, "delta_weights": w.delta}
    out = []
    for key, x in targets.items():
        num, _ = central_difference(f, x, h)
        out.append(CheckResult(f"deform.{key}", relative_error(analytic[key], num), tol))
    return out


def _render_signature(out):
    # draw order per tile plus per-pixel contributor counts
    return out.cache.ids.copy(), out.n_contrib.copy()


def _same_signature(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check_render(seed: int, n: int = 20, size: int = 24, h: float = DEFAULT_STEP, tol: float = 1e-3,
                 smooth: bool = True, deformed: bool = True) -> list:
    """Deform (optional) -> render -> random linear functional of image and entity alpha.

    With ``smooth`` the footprint cutoff and early exit are disabled. FD
    entries whose +/-h renders differ in depth order (and, in tiled mode,
    per-pixel contributor counts) straddle a discontinuity; they are skipped
    and counted.
    """
    rng = np.random.default_rng(seed)
    na = n // 2
    sets = [random_gaussians(rng, na, "a"), random_gaussians(rng, n - na, "b")]
    n_k = 3
    ws = [random_weights(rng, n_k, len(s)) for s in sets]
    bones = random_bones(rng, n_k, angle=0.3, shift=0.1)
    eye = rng.normal(0, 0.3, 3) + np.array([0.0, 0.0, -3.0])
    cam = Camera.look_at(eye, rng.normal(0, 0.05, 3), fx=size * 1.25, width=size, height=size)
    bg = rng.uniform(0, 0.5, 3)
    cfg = SMOOTH if smooth else RenderConfig()
    w_img = rng.normal(size=(size, size, 3))
    w_alpha = rng.normal(size=(2, size, size))

    def forward():
        inputs = [deform_gaussians(s, w, bones) for s, w in zip(sets, ws)] if deformed else sets
        o = render(inputs, cam, bg, cfg)
        return float(np.sum(w_img * o.image) + np.sum(w_alpha * o.entity_alpha)), o, inputs

    def f():
        val, o, _ = forward()
        return val, (_render_signature(o) if not smooth else o.cache.ids.copy())

    _, o, inputs = forward()
    grads = render_backward(o, w_img, w_alpha)
    valid = _same_signature if not smooth else (lambda a, b: bool(np.array_equal(a, b)))
    out = []
    tag = "smooth" if smooth else "tiled"
    for si, (s, w, gr) in enumerate(zip(sets, ws, grads)):
        if deformed:
            g_mu, g_R, g_delta = deform_backward(inputs[si].cache, gr.means, gr.sh_rotations, gr.cov_rotations)
            analytic = {"means": g_mu, "quats": quat_to_matrix_backward(s.quats, g_R), "delta_weights": g_delta}
        else:
            analytic = {"means": gr.means, "quats": gr.quats(s.quats)}
        analytic.update(scales_raw=gr.scales_raw, opacity_raw=gr.opacity_raw, sh=gr.sh)
        targets = dict(s.param_arrays())
        if deformed:
            targets["delta_weights"] = w.delta
        for key, a in analytic.items():
            num, mask = central_difference(f, targets[key], h, valid)
            err = relative_error(np.where(mask, a, 0.0), np.where(mask, num, 0.0))
            out.append(CheckResult(f"render[{tag}].{s.label}.{key}", err, tol, int((~mask).sum())))
    return out


def _check_array(name, f, x, analytic, h, tol, valid=None):
    num, mask = central_difference(f, x, h, valid)
    err = relative_error(np.where(mask, analytic, 0.0), np.where(mask, num, 0.0))
    return CheckResult(name, err, tol, int((~mask).sum()))


def _iso_signs(mu, cov, ref_mu, ref_cov, nb):
    i = np.repeat(np.arange(len(nb)), nb.shape[1])
    j = nb.reshape(-1)
    d = np.linalg.norm(mu[i] - mu[j], axis=1) - np.linalg.norm(ref_mu[i] - ref_mu[j], axis=1)
    e = (np.linalg.norm((cov[i] - cov[j]).reshape(len(i), -1), axis=1)
         - np.linalg.norm((ref_cov[i] - ref_cov[j]).reshape(len(i), -1), axis=1))
    return np.sign(d), np.sign(e)


def check_losses(seed: int, n: int = 16, size: int = 12, h: float = DEFAULT_STEP, tol: float = 1e-3) -> list:
    rng = np.random.default_rng(seed)
    out = []

    # image losses: keep |a - b| away from the L1 kink
    b = rng.uniform(0.1, 0.9, (size, size, 3))
    a = b + rng.choice([-1.0, 1.0], b.shape) * rng.uniform(0.01, 0.1, b.shape)
    out.append(_check_array("loss.recon_l1", lambda: losses.recon_l1(a, b)[0], a, losses.recon_l1(a, b)[1], h, tol))
    m = (rng.uniform(size=(2, size, size)) > 0.5).astype(float)
    al = np.clip(m + rng.choice([-1.0, 1.0], m.shape) * rng.uniform(0.05, 0.3, m.shape), 0.01, 0.99)
    out.append(_check_array("loss.mask", lambda: losses.mask_loss(al, m)[0], al, losses.mask_loss(al, m)[1], h, tol))
    out.append(_check_array("loss.ssim", lambda: losses.ssim_and_grad(a, b, 7)[0], a,
                            losses.ssim_and_grad(a, b, 7)[1], h, tol))
    s3 = dict(patch_size=9, kernel_size=5, stride=2, repeats=3, rng=seed)
    out.append(_check_array("loss.s3im", lambda: losses.s3im(a, b, **s3)[0], a, losses.s3im(a, b, **s3)[1], h, tol))

    # neighbourhood losses
    g = random_gaussians(rng, n)
    n_k = 4
    g.weights = random_weights(rng, n_k, n, delta=0.1)
    # keep the largest scale clear of the runner-up so the max term is differentiable
    g.scales_raw[np.arange(n), np.argmax(g.scales_raw, axis=1)] += 0.05
    nb_self = losses.knn_graph(g.means, 5, include_self=True)
    val, grads = losses.gaussian_reg_loss(g, nb_self, 0.3, 0.7)

    def greg():
        return losses.gaussian_reg_loss(g, nb_self, 0.3, 0.7)[0]

    for key, x in g.param_arrays().items():
        out.append(_check_array(f"loss.gaussian_reg.{key}", greg, x, grads[key], h, tol))

    ref_mu = g.means.copy()
    ref_cov = g.covariances()
    nb = losses.knn_graph(ref_mu, 5)
    mu = ref_mu + rng.normal(0, 0.05, ref_mu.shape)
    cov = ref_cov + 0.01 * rng.normal(size=ref_cov.shape)
    _, gm, gc, gm0, gc0 = losses.iso_loss(mu, cov, ref_mu, ref_cov, nb, 1.0, 0.5, with_reference=True)

    # |d - d0| has a kink; entries whose step flips a sign are skipped
    def iso():
        val = losses.iso_loss(mu, cov, ref_mu, ref_cov, nb, 1.0, 0.5)[0]
        return val, _iso_signs(mu, cov, ref_mu, ref_cov, nb)

    out.append(_check_array("loss.iso.means", iso, mu, gm, h, tol, _same_signature))
    out.append(_check_array("loss.iso.covs", iso, cov, gc, h, tol, _same_signature))
    out.append(_check_array("loss.iso.ref_means", iso, ref_mu, gm0, h, tol, _same_signature))
    out.append(_check_array("loss.iso.ref_covs", iso, ref_cov, gc0, h, tol, _same_signature))

    # collision: body on a unit sphere, garment shell partly pushed inside
    dirs = rng.normal(size=(3 * n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    body = dirs[:n] * 1.0
    garment = dirs[n:] * rng.uniform(0.8, 1.2, (2 * n, 1))
    joints = rng.normal(0, 0.05, (3, 3))
    _, gb, gg = losses.collision_loss(body, garment, joints, 0.05)

    # nearest-point reassignment and the hinge are skipped like the iso kink
    def col():
        val = losses.collision_loss(body, garment, joints, 0.05)[0]
        c_idx, k_idx, _ = losses.collision_terms(body, garment, joints)
        dot = np.sum((garment[c_idx] - body) * (body - joints[k_idx]), axis=1)
        return val, (c_idx, k_idx, dot < 0.05)

    out.append(_check_array("loss.collision.body", col, body, gb, h, tol, _same_signature))
    out.append(_check_array("loss.collision.garment", col, garment, gg, h, tol, _same_signature))
    return out


def run_suite(n_scenes: int = 50, seed: int = 0, include_tiled: bool = True, log=None) -> list:
    """All checks over ``n_scenes`` seeds; returns a flat list of results."""
    results = []
    t0 = time.perf_counter()
    for s in range(seed, seed + n_scenes):
        results += check_deform(s)
        results += check_render(s)
        if include_tiled:
            results += check_render(s, smooth=False, deformed=False)
        results += check_losses(s)
        if log is not None:
            worst = max(results, key=lambda r: r.error / r.tolerance)
            log(f"scene {s}: {len(results)} checks, worst {worst.name} {worst.error:.2e} "
                f"({time.perf_counter() - t0:.1f}s)")
    return results
