"""Tile-based front-to-back alpha compositing of projected 2D Gaussians.

The per-kernel quantities (2D mean, conic, opacity, blend weight, feature
vector, sort depth) are produced upstream in torch; this module does the
per-pixel work in numba and exposes it as a ``torch.autograd.Function``.

Per pixel, for kernels sorted by depth:

    alpha_i  = min(alpha_max, o_i * exp(-power_i))       (skipped if < 1/255)
    alpha'_i = alpha_i * w_i
    out      = sum_i f_i alpha'_i T_i + T_final * bg,   T_i = prod_{k<i} (1 - alpha'_k)

The backward pass walks each tile's list back to front, recovering T_i from
the stored final transmittance. A fully opaque entry (alpha' = 1) would make
that division singular, so the forward pass records it and the T in front of it.
"""

from __future__ import annotations

import math

import numba
import numpy as np
import torch
from numba import prange

ALPHA_MIN = 1.0 / 255.0


def bin_kernels(means2d, conics, opacities, depths, valid, width, height, tile_size):
    """Assign kernels to tiles, sorted by (tile, depth, index).

    The footprint box bounds the ellipse where ``o * exp(-power)`` reaches
    1/255, so no pixel outside it can receive a non-skipped contribution.
    Returns (tile_ranges (n_tiles, 2), kernel ids of the flattened list,
    per-kernel pixel boxes (N, 4) as x0, x1, y0, y1 with exclusive ends).
    """
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    n = means2d.shape[0]
    boxes = np.zeros((n, 4), np.int64)
    empty = np.zeros((n_tiles, 2), np.int64), np.zeros(0, np.int64), boxes
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return empty
    a, b, c = conics[idx, 0], conics[idx, 1], conics[idx, 2]
    det = a * c - b * b
    # extents of the ellipse {power <= thr}: |dx| <= sqrt(2 thr * cov_xx), cov = conic^-1
    thr = np.log(np.maximum(opacities[idx], ALPHA_MIN) * 255.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rx = np.sqrt(np.maximum(2.0 * thr * c / det, 0.0)) + 1e-6
        ry = np.sqrt(np.maximum(2.0 * thr * a / det, 0.0)) + 1e-6
    mx, my = means2d[idx, 0], means2d[idx, 1]
    px0 = np.clip(np.ceil(mx - rx), 0, width).astype(np.int64)
    px1 = np.clip(np.floor(mx + rx) + 1, 0, width).astype(np.int64)
    py0 = np.clip(np.ceil(my - ry), 0, height).astype(np.int64)
    py1 = np.clip(np.floor(my + ry) + 1, 0, height).astype(np.int64)
    keep = (px1 > px0) & (py1 > py0) & (thr > 0) & np.isfinite(rx) & np.isfinite(ry)
    idx, px0, px1, py0, py1 = idx[keep], px0[keep], px1[keep], py0[keep], py1[keep]
    boxes[idx] = np.stack([px0, px1, py0, py1], 1)
    x0, x1 = px0 // tile_size, (px1 - 1) // tile_size + 1
    y0, y1 = py0 // tile_size, (py1 - 1) // tile_size + 1
    counts = (x1 - x0) * (y1 - y0)
    total = int(counts.sum())
    if total == 0:
        return empty
    kid, tid = _expand_tiles(idx, x0, x1, y0, y1, counts, tiles_x, total)
    order = np.lexsort((kid, depths[kid], tid))
    kid, tid = kid[order], tid[order]
    starts = np.searchsorted(tid, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tid, np.arange(n_tiles), side="right")
    return np.stack([starts, ends], 1).astype(np.int64), kid, boxes


@numba.njit(cache=True)
def _expand_tiles(idx, x0, x1, y0, y1, counts, tiles_x, total):
    kid = np.empty(total, np.int64)
    tid = np.empty(total, np.int64)
    p = 0
    for j in range(idx.size):
        for ty in range(y0[j], y1[j]):
            for tx in range(x0[j], x1[j]):
                kid[p] = idx[j]
                tid[p] = ty * tiles_x + tx
                p += 1
    return kid, tid


@numba.njit(parallel=True, cache=True)
def _forward(means2d, conics, opac, weight, feats, bg, tile_ranges, kids, boxes, width, height, tile_size,
             alpha_max):
    # Kernel-major within a tile: each kernel visits only the pixels of its box,
    # while every pixel still accumulates its kernels in depth order.
    n_ch = feats.shape[1]
    tiles_x = (width + tile_size - 1) // tile_size
    n_tiles = tile_ranges.shape[0]
    out = np.empty((height, width, n_ch), feats.dtype)
    trans = np.empty((height, width), feats.dtype)
    # entry that drove T to exactly 0 (alpha' = 1) and the T in front of it
    stop = np.full((height, width), -1, np.int64)
    t_stop = np.zeros((height, width), feats.dtype)
    for t in prange(n_tiles):
        tx0 = (t % tiles_x) * tile_size
        ty0 = (t // tiles_x) * tile_size
        tx1 = min(tx0 + tile_size, width)
        ty1 = min(ty0 + tile_size, height)
        acc = np.zeros((tile_size, tile_size, n_ch), feats.dtype)
        T = np.ones((tile_size, tile_size), feats.dtype)
        for j in range(tile_ranges[t, 0], tile_ranges[t, 1]):
            g = kids[j]
            ca, cb, cc = conics[g, 0], conics[g, 1], conics[g, 2]
            mx, my, o, w = means2d[g, 0], means2d[g, 1], opac[g], weight[g]
            for py in range(max(ty0, boxes[g, 2]), min(ty1, boxes[g, 3])):
                dy = py - my
                for px in range(max(tx0, boxes[g, 0]), min(tx1, boxes[g, 1])):
                    dx = px - mx
                    power = 0.5 * (ca * dx * dx + cc * dy * dy) + cb * dx * dy
                    alpha = o * math.exp(-power)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < ALPHA_MIN:
                        continue
                    a2 = alpha * w
                    ly, lx = py - ty0, px - tx0
                    wgt = a2 * T[ly, lx]
                    for ch in range(n_ch):
                        acc[ly, lx, ch] += feats[g, ch] * wgt
                    if a2 >= 1.0 and stop[py, px] < 0:
                        stop[py, px] = j
                        t_stop[py, px] = T[ly, lx]
                    T[ly, lx] = T[ly, lx] * (1.0 - a2)
        for py in range(ty0, ty1):
            for px in range(tx0, tx1):
                ly, lx = py - ty0, px - tx0
                for ch in range(n_ch):
                    out[py, px, ch] = acc[ly, lx, ch] + T[ly, lx] * bg[ch]
                trans[py, px] = T[ly, lx]
    return out, trans, stop, t_stop


@numba.njit(parallel=True, cache=True)
def _backward(means2d, conics, opac, weight, feats, bg, tile_ranges, kids, boxes, width, height, tile_size,
              alpha_max, trans, stop, t_stop, grad_out):
    """Per-entry gradients (one row per flattened tile/kernel pair, so no write races)."""
    n_ch = feats.shape[1]
    tiles_x = (width + tile_size - 1) // tile_size
    n_tiles = tile_ranges.shape[0]
    m = kids.size
    g_mean = np.zeros((m, 2), feats.dtype)
    g_conic = np.zeros((m, 3), feats.dtype)
    g_opac = np.zeros(m, feats.dtype)
    g_weight = np.zeros(m, feats.dtype)
    g_feat = np.zeros((m, n_ch), feats.dtype)
    g_bg = np.zeros((n_tiles, n_ch), feats.dtype)
    for t in prange(n_tiles):
        tx0 = (t % tiles_x) * tile_size
        ty0 = (t // tiles_x) * tile_size
        tx1 = min(tx0 + tile_size, width)
        ty1 = min(ty0 + tile_size, height)
        T = np.ones((tile_size, tile_size), feats.dtype)
        behind = np.zeros((tile_size, tile_size, n_ch), feats.dtype)
        for py in range(ty0, ty1):
            for px in range(tx0, tx1):
                ly, lx = py - ty0, px - tx0
                T[ly, lx] = trans[py, px]
                for ch in range(n_ch):
                    g_bg[t, ch] += trans[py, px] * grad_out[py, px, ch]
                    behind[ly, lx, ch] = bg[ch]
        for j in range(tile_ranges[t, 1] - 1, tile_ranges[t, 0] - 1, -1):
            g = kids[j]
            ca, cb, cc = conics[g, 0], conics[g, 1], conics[g, 2]
            mx, my, o, w = means2d[g, 0], means2d[g, 1], opac[g], weight[g]
            for py in range(max(ty0, boxes[g, 2]), min(ty1, boxes[g, 3])):
                dy = py - my
                for px in range(max(tx0, boxes[g, 0]), min(tx1, boxes[g, 1])):
                    dx = px - mx
                    power = 0.5 * (ca * dx * dx + cc * dy * dy) + cb * dx * dy
                    gauss = math.exp(-power)
                    raw = o * gauss
                    alpha = raw
                    clamped = False
                    if alpha > alpha_max:
                        alpha = alpha_max
                        clamped = True
                    if alpha < ALPHA_MIN:
                        continue
                    ly, lx = py - ty0, px - tx0
                    a2 = alpha * w
                    sj = stop[py, px]
                    if sj >= 0 and j > sj:
                        # hidden behind an opaque entry: only the color seen through it changes
                        for ch in range(n_ch):
                            behind[ly, lx, ch] = a2 * feats[g, ch] + (1.0 - a2) * behind[ly, lx, ch]
                        continue
                    if j == sj:
                        Ti = t_stop[py, px]
                    else:
                        Ti = T[ly, lx] / (1.0 - a2)
                    T[ly, lx] = Ti
                    d_a2 = 0.0
                    for ch in range(n_ch):
                        go = grad_out[py, px, ch]
                        f = feats[g, ch]
                        g_feat[j, ch] += a2 * Ti * go
                        d_a2 += go * (f - behind[ly, lx, ch])
                        behind[ly, lx, ch] = a2 * f + (1.0 - a2) * behind[ly, lx, ch]
                    d_a2 *= Ti
                    g_weight[j] += d_a2 * alpha
                    if clamped:
                        continue
                    d_alpha = d_a2 * w
                    g_opac[j] += d_alpha * gauss
                    d_power = -d_alpha * raw
                    g_mean[j, 0] += -d_power * (ca * dx + cb * dy)
                    g_mean[j, 1] += -d_power * (cb * dx + cc * dy)
                    g_conic[j, 0] += d_power * 0.5 * dx * dx
                    g_conic[j, 1] += d_power * dx * dy
                    g_conic[j, 2] += d_power * 0.5 * dy * dy
    return g_mean, g_conic, g_opac, g_weight, g_feat, g_bg


@numba.njit(cache=True)
def _reduce(kids, n, g_mean, g_conic, g_opac, g_weight, g_feat, g_bg):
    n_ch = g_feat.shape[1]
    mean = np.zeros((n, 2), g_feat.dtype)
    conic = np.zeros((n, 3), g_feat.dtype)
    opac = np.zeros(n, g_feat.dtype)
    weight = np.zeros(n, g_feat.dtype)
    feat = np.zeros((n, n_ch), g_feat.dtype)
    bg = np.zeros(n_ch, g_feat.dtype)
    for j in range(kids.size):
        g = kids[j]
        mean[g, 0] += g_mean[j, 0]
        mean[g, 1] += g_mean[j, 1]
        for k in range(3):
            conic[g, k] += g_conic[j, k]
        opac[g] += g_opac[j]
        weight[g] += g_weight[j]
        for ch in range(n_ch):
            feat[g, ch] += g_feat[j, ch]
    for t in range(g_bg.shape[0]):
        for ch in range(n_ch):
            bg[ch] += g_bg[t, ch]
    return mean, conic, opac, weight, feat, bg


def _np(x: torch.Tensor, dtype) -> np.ndarray:
    return np.ascontiguousarray(x.detach().cpu().numpy().astype(dtype, copy=False))


class _Rasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conics, opacities, weights, feats, bg, depths, valid, width, height, tile_size,
                alpha_max):
        dt = feats.dtype
        np_dt = np.float64 if dt == torch.float64 else np.float32
        a = [_np(x, np_dt) for x in (means2d, conics, opacities, weights, feats, bg)]
        tile_ranges, kids, boxes = bin_kernels(a[0], a[1], a[2], _np(depths, np.float64), _np(valid, np.bool_),
                                               width, height, tile_size)
        out, trans, stop, t_stop = _forward(*a, tile_ranges, kids, boxes, width, height, tile_size,
                                            np_dt(alpha_max))
        ctx.raster = (a, tile_ranges, kids, boxes, width, height, tile_size, np_dt(alpha_max), trans, stop, t_stop)
        out_t = torch.from_numpy(out)
        alpha_t = torch.from_numpy(1.0 - trans)
        ctx.mark_non_differentiable(alpha_t)
        return out_t, alpha_t

    @staticmethod
    def backward(ctx, grad_out, _grad_alpha):
        if getattr(ctx, "raster", None) is None:
            raise RuntimeError("rasterizer backward called without saved forward state")
        a, tile_ranges, kids, boxes, width, height, tile_size, alpha_max, trans, stop, t_stop = ctx.raster
        g = _np(grad_out, a[4].dtype)
        parts = _backward(*a, tile_ranges, kids, boxes, width, height, tile_size, alpha_max, trans, stop, t_stop, g)
        mean, conic, opac, weight, feat, bg = _reduce(kids, a[0].shape[0], *parts)
        t = torch.from_numpy
        return t(mean), t(conic), t(opac), t(weight), t(feat), t(bg), None, None, None, None, None, None


def rasterize(means2d, conics, opacities, weights, feats, bg, depths, valid, width: int, height: int,
              tile_size: int = 16, alpha_max: float = 0.999):
    """Composite projected kernels; returns (image (H, W, C), accumulated alpha (H, W)).

    ``conics`` holds the inverse 2D covariance as (a, b, c) = (inv_xx, inv_xy, inv_yy).
    ``valid`` marks kernels that survived culling. Kernels are sorted by ``depths``
    with ties broken by index.
    """
    feats = feats.contiguous()
    dt = feats.dtype
    bg = torch.as_tensor(bg, dtype=dt).reshape(-1).expand(feats.shape[1]).contiguous()
    return _Rasterize.apply(means2d.to(dt), conics.to(dt), opacities.to(dt), weights.to(dt), feats, bg,
                            depths, valid, int(width), int(height), int(tile_size), float(alpha_max))

