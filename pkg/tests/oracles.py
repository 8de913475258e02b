"""Slow, independent reference implementations used only by the tests.

Nothing here imports the package's numerics; each oracle is written from
the textbook formula with plain loops or direct numpy so that agreement is
evidence rather than tautology.
"""

import math

import numpy as np

Y00 = 0.5 * math.sqrt(1.0 / math.pi)
Y1 = math.sqrt(3.0 / (4.0 * math.pi))


def quat_matrix(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sh_eval(coeffs, d):
    """RGB from (3, C) coefficients, C in {1, 4}, before the 0.5 offset."""
    x, y, z = d
    basis = [Y00]
    if coeffs.shape[1] >= 4:
        basis += [-Y1 * y, Y1 * z, -Y1 * x]
    return coeffs[:, :len(basis)] @ np.array(basis)


def brute_render(means, quats, scales, opacities, sh, labels, R, t, fx, fy, cx, cy, W, H, bg,
                 near=0.01, dilation=0.3, cutoff=3.0, alpha_max=0.99, t_min=1e-4, with_median=False):
    """All pixels against all Gaussians, front to back; one Gaussian at a time over the full image.

    ``with_median`` also returns the depth at which transmittance first drops
    below 0.5 (inf where it never does).
    """
    n = len(means)
    ents = []
    for lab in labels:
        if lab not in ents:
            ents.append(lab)
    cam_center = -R.T @ t
    items = []
    for i in range(n):
        p = R @ means[i] + t
        if p[2] <= near:
            continue
        Rq = quat_matrix(quats[i])
        cov = Rq @ np.diag(np.asarray(scales[i]) ** 2) @ Rq.T
        J = np.array([[fx / p[2], 0, -fx * p[0] / p[2] ** 2], [0, fy / p[2], -fy * p[1] / p[2] ** 2]])
        c2 = J @ R @ cov @ R.T @ J.T + dilation * np.eye(2)
        if np.linalg.det(c2) <= 0:
            continue
        d = means[i] - cam_center
        d = d / np.linalg.norm(d)
        col = np.maximum(sh_eval(sh[i], Rq.T @ d) + 0.5, 0.0)
        uv = np.array([fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy])
        items.append((p[2], i, uv, np.linalg.inv(c2), col, ents.index(labels[i])))
    items.sort(key=lambda it: (it[0], it[1]))

    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    T = np.ones((H, W))
    img = np.zeros((H, W, 3))
    ent_alpha = np.zeros((max(len(ents), 1), H, W))
    done = np.zeros((H, W), dtype=bool)
    median = np.full((H, W), np.inf)
    for z, i, uv, Ci, col, e in items:
        dx, dy = xs - uv[0], ys - uv[1]
        power = Ci[0, 0] * dx * dx + 2 * Ci[0, 1] * dx * dy + Ci[1, 1] * dy * dy
        a = np.minimum(opacities[i] * np.exp(-0.5 * power), alpha_max)
        a = np.where((power <= cutoff * cutoff) & ~done, a, 0.0)
        w = a * T
        img += w[..., None] * col
        ent_alpha[e] += w
        T = T * (1 - a)
        median = np.where(np.isinf(median) & (T < 0.5), z, median)
        done |= T < t_min
    img += T[..., None] * np.asarray(bg, dtype=float)
    if with_median:
        return img, ent_alpha[:len(ents)], 1 - T, median
    return img, ent_alpha[:len(ents)], 1 - T


def l1_loop(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    flat_a, flat_b = a.reshape(-1), b.reshape(-1)
    total = 0.0
    for i in range(flat_a.size):
        total += abs(flat_a[i] - flat_b[i])
    return total / flat_a.size


def std_reg_loop(attrs, neighbors):
    """Mean over points of the per-attribute averaged per-dimension population std."""
    n = len(neighbors)
    total = 0.0
    for i in range(n):
        for X in attrs:
            X = np.asarray(X, float).reshape(len(X), -1)
            rows = X[neighbors[i]]
            d = X.shape[1]
            acc = 0.0
            for j in range(d):
                col = rows[:, j]
                m = sum(col) / len(col)
                acc += math.sqrt(sum((v - m) ** 2 for v in col) / len(col))
            total += acc / d
    return total / n


def iso_loop(means, covs, ref_means, ref_covs, neighbors, lam_mu, lam_sigma):
    total = 0.0
    for i in range(len(neighbors)):
        for j in neighbors[i]:
            total += lam_mu * abs(math.dist(means[i], means[j]) - math.dist(ref_means[i], ref_means[j]))
            total += lam_sigma * abs(np.sqrt(((covs[i] - covs[j]) ** 2).sum())
                                     - np.sqrt(((ref_covs[i] - ref_covs[j]) ** 2).sum()))
    return total


def lbs_loop(means, weights_eff, bones):
    """Naive weighted-sum-of-matrices deformation, one Gaussian at a time."""
    out = np.zeros_like(means)
    blended = []
    for i in range(len(means)):
        T = np.zeros((4, 4))
        for k in range(len(bones)):
            T += weights_eff[k, i] * bones[k]
        out[i] = T[:3, :3] @ means[i] + T[:3, 3]
        blended.append(T)
    return out, np.array(blended)


def ssim_window(a, b, sigma=1.5, size=11, c1=0.01 ** 2, c2=0.03 ** 2):
    """SSIM of one channel pair, explicit window loops with valid padding."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    w2 = np.outer(g, g)
    H, W = a.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = (w2 * pa).sum(), (w2 * pb).sum()
            va = (w2 * pa * pa).sum() - ma * ma
            vb = (w2 * pb * pb).sum() - mb * mb
            cab = (w2 * pa * pb).sum() - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def s3im_oracle(a, b, patch, repeats, seed, kernel=11):
    """Replays the corner stream (row then column per repeat) and averages 1 - SSIM."""
    rng = np.random.default_rng(seed)
    H, W = a.shape[:2]
    vals = []
    for _ in range(repeats):
        y0 = int(rng.integers(0, H - patch + 1))
        x0 = int(rng.integers(0, W - patch + 1))
        pa, pb = a[y0:y0 + patch, x0:x0 + patch], b[y0:y0 + patch, x0:x0 + patch]
        s = np.mean([ssim_window(pa[..., c], pb[..., c], size=kernel) for c in range(a.shape[2])])
        vals.append(1 - s)
    return float(np.mean(vals))


def collision_loop(body, garment, joints, margin):
    total = 0.0
    for vb in body:
        vc = min(garment, key=lambda g: float(np.sum((g - vb) ** 2)))
        vk = min(joints, key=lambda k: float(np.sum((k - vb) ** 2)))
        h = max(0.0, margin - float(np.dot(vc - vb, vb - vk)))
        total += h ** 3
    return total
