"""Numba kernels for tile binning, compositing and its reverse replay.

Forward and backward loops run over tiles with ``prange``. Every pixel
belongs to one tile and every (tile, Gaussian) pair is owned by one tile, so
no two iterations write the same memory. Per-Gaussian gradients are summed
from the pair buffer in list order, which keeps results independent of the
thread count.
"""

import math

import numpy as np
from numba import njit, prange

# columns of the per-pair gradient buffer
G_U, G_V, G_CA, G_CB, G_CC, G_OPA, G_R, G_G, G_B = range(9)
N_GRAD = 9


@njit(cache=True)
def bin_gaussians(order, rects, n_tiles):
    """Counting sort of (tile, Gaussian) pairs; Gaussians are visited in ``order``.

    ``rects[i] = (tx0, tx1, ty0, ty1, tiles_x)`` inclusive tile ranges; an
    empty range (tx0 > tx1) means the Gaussian touches no tile.
    """
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for gi in order:
        tx0, tx1, ty0, ty1, tiles_x = rects[gi, 0], rects[gi, 1], rects[gi, 2], rects[gi, 3], rects[gi, 4]
        if tx0 > tx1 or ty0 > ty1:
            continue
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for gi in order:
        tx0, tx1, ty0, ty1, tiles_x = rects[gi, 0], rects[gi, 1], rects[gi, 2], rects[gi, 3], rects[gi, 4]
        if tx0 > tx1 or ty0 > ty1:
            continue
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = gi
                fill[t] += 1
    return offsets, ids


@njit(parallel=True, cache=True)
def forward_kernel(offsets, ids, mean2d, conic, opacity, colors, ent, depth, n_ent, bg,
                   width, height, tile, tiles_x, cutoff2, alpha_max, t_min):
    n_tiles = len(offsets) - 1
    image = np.empty((height, width, 3))
    ent_alpha = np.zeros((n_ent, height, width))
    final_t = np.empty((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    n_contrib = np.zeros((height, width), dtype=np.int64)
    depth_map = np.zeros((height, width))
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                dz = 0.0
                nc = 0
                stop = start
                for k in range(start, end):
                    gi = ids[k]
                    dx = px - mean2d[gi, 0]
                    dy = py - mean2d[gi, 1]
                    power = conic[gi, 0] * dx * dx + 2.0 * conic[gi, 1] * dx * dy + conic[gi, 2] * dy * dy
                    if power > cutoff2:
                        continue
                    a = opacity[gi] * math.exp(-0.5 * power)
                    if a > alpha_max:
                        a = alpha_max
                    w = a * T
                    cr += colors[gi, 0] * w
                    cg += colors[gi, 1] * w
                    cb += colors[gi, 2] * w
                    dz += depth[gi] * w
                    ent_alpha[ent[gi], py, px] += w
                    T *= 1.0 - a
                    nc += 1
                    stop = k + 1
                    if T < t_min:
                        break
                image[py, px, 0] = cr + T * bg[0]
                image[py, px, 1] = cg + T * bg[1]
                image[py, px, 2] = cb + T * bg[2]
                final_t[py, px] = T
                last[py, px] = stop
                n_contrib[py, px] = nc
                depth_map[py, px] = dz
    return image, ent_alpha, final_t, last, n_contrib, depth_map


@njit(parallel=True, cache=True)
def backward_kernel(offsets, ids, mean2d, conic, opacity, colors, ent, bg, final_t, last,
                    grad_image, grad_alpha, width, height, tile, tiles_x, cutoff2, alpha_max):
    """Back-to-front replay; fills one gradient row per (tile, Gaussian) pair."""
    n_tiles = len(offsets) - 1
    pair_grad = np.zeros((len(ids), N_GRAD))
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = final_t[py, px]
                gr = grad_image[py, px, 0]
                gg = grad_image[py, px, 1]
                gb = grad_image[py, px, 2]
                # colour and alpha-gradient seen behind the current Gaussian
                rr = bg[0]
                rg = bg[1]
                rb = bg[2]
                q = 0.0
                for k in range(last[py, px] - 1, start - 1, -1):
                    gi = ids[k]
                    dx = px - mean2d[gi, 0]
                    dy = py - mean2d[gi, 1]
                    power = conic[gi, 0] * dx * dx + 2.0 * conic[gi, 1] * dx * dy + conic[gi, 2] * dy * dy
                    if power > cutoff2:
                        continue
                    G = math.exp(-0.5 * power)
                    raw = opacity[gi] * G
                    a = raw if raw <= alpha_max else alpha_max
                    t_before = T / (1.0 - a)
                    ga = grad_alpha[ent[gi], py, px]
                    c0 = colors[gi, 0]
                    c1 = colors[gi, 1]
                    c2 = colors[gi, 2]
                    d_alpha = t_before * ((c0 - rr) * gr + (c1 - rg) * gg + (c2 - rb) * gb + ga - q)
                    w = a * t_before
                    pair_grad[k, G_R] += w * gr
                    pair_grad[k, G_G] += w * gg
                    pair_grad[k, G_B] += w * gb
                    rr = c0 * a + (1.0 - a) * rr
                    rg = c1 * a + (1.0 - a) * rg
                    rb = c2 * a + (1.0 - a) * rb
                    q = ga * a + (1.0 - a) * q
                    T = t_before
                    if raw > alpha_max:
                        continue
                    pair_grad[k, G_OPA] += G * d_alpha
                    d_power = -0.5 * G * opacity[gi] * d_alpha
                    pair_grad[k, G_CA] += d_power * dx * dx
                    pair_grad[k, G_CB] += d_power * 2.0 * dx * dy
                    pair_grad[k, G_CC] += d_power * dy * dy
                    pair_grad[k, G_U] += -2.0 * d_power * (conic[gi, 0] * dx + conic[gi, 1] * dy)
                    pair_grad[k, G_V] += -2.0 * d_power * (conic[gi, 1] * dx + conic[gi, 2] * dy)
    return pair_grad


@njit(cache=True)
def reduce_pairs(ids, pair_grad, n):
    out = np.zeros((n, pair_grad.shape[1]))
    for k in range(len(ids)):
        gi = ids[k]
        for c in range(pair_grad.shape[1]):
            out[gi, c] += pair_grad[k, c]
    return out
