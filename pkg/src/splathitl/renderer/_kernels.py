"""Numba kernels for the tiled splat rasterizer.

Pixel (i, j) is centered at image coordinates (i, j). Every per-pixel
quantity is accumulated in float64 in depth order, so the result only
depends on the inputs, never on the tile schedule.
"""
from __future__ import annotations

import math

import numba
import numpy as np

from .sh import sh_basis

TILE = 16


@numba.njit(cache=True, parallel=True)
def preprocess(means, cov6, opac, sh, R, t, cam_center, fx, fy, cx, cy, width, height,
               near, far, dilation, alpha_min):
    """Project all Gaussians; returns per-Gaussian screen data and a keep mask.

    ``geom[i] = (u, v, conic_a, conic_b, conic_c, z, x0, x1, y0, y1, r2)`` where
    the conic is the inverse 2D covariance, r2 the squared Mahalanobis radius
    beyond which alpha < ``alpha_min`` and [x0, x1] x [y0, y1] the inclusive
    pixel box of that ellipse.
    """
    n = means.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    geom = np.empty((n, 11))
    for i in numba.prange(n):
        mx, my, mz = means[i, 0], means[i, 1], means[i, 2]
        x = R[0, 0] * mx + R[0, 1] * my + R[0, 2] * mz + t[0]
        y = R[1, 0] * mx + R[1, 1] * my + R[1, 2] * mz + t[1]
        z = R[2, 0] * mx + R[2, 1] * my + R[2, 2] * mz + t[2]
        if z < near or z > far:
            continue
        op = opac[i]
        if op < alpha_min:
            continue
        iz = 1.0 / z
        # T = J @ R, J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]] with x/z, y/z
        # clamped to 1.3x the half field of view (linearization guard)
        limx = 1.3 * 0.5 * width / fx
        limy = 1.3 * 0.5 * height / fy
        txz = min(max(x * iz, -limx), limx)
        tyz = min(max(y * iz, -limy), limy)
        j00 = fx * iz
        j02 = -fx * txz * iz
        j11 = fy * iz
        j12 = -fy * tyz * iz
        t00 = j00 * R[0, 0] + j02 * R[2, 0]
        t01 = j00 * R[0, 1] + j02 * R[2, 1]
        t02 = j00 * R[0, 2] + j02 * R[2, 2]
        t10 = j11 * R[1, 0] + j12 * R[2, 0]
        t11 = j11 * R[1, 1] + j12 * R[2, 1]
        t12 = j11 * R[1, 2] + j12 * R[2, 2]
        sxx, sxy, sxz, syy, syz, szz = cov6[i, 0], cov6[i, 1], cov6[i, 2], cov6[i, 3], cov6[i, 4], cov6[i, 5]
        # rows of T @ Sigma
        a0 = t00 * sxx + t01 * sxy + t02 * sxz
        a1 = t00 * sxy + t01 * syy + t02 * syz
        a2 = t00 * sxz + t01 * syz + t02 * szz
        b0 = t10 * sxx + t11 * sxy + t12 * sxz
        b1 = t10 * sxy + t11 * syy + t12 * syz
        b2 = t10 * sxz + t11 * syz + t12 * szz
        c00 = a0 * t00 + a1 * t01 + a2 * t02 + dilation
        c01 = a0 * t10 + a1 * t11 + a2 * t12
        c11 = b0 * t10 + b1 * t11 + b2 * t12 + dilation
        det = c00 * c11 - c01 * c01
        if not det > 0.0:
            continue
        u = cx + fx * x * iz
        v = cy + fy * y * iz
        # alpha = op * exp(-q/2) >= alpha_min  <=>  q <= r2
        r2 = max(2.0 * math.log(op / alpha_min), 0.0)
        rx = math.sqrt(r2 * c00) * (1.0 + 1e-9) + 1e-9
        ry = math.sqrt(r2 * c11) * (1.0 + 1e-9) + 1e-9
        x0 = max(math.ceil(u - rx), 0.0)
        x1 = min(math.floor(u + rx), width - 1.0)
        y0 = max(math.ceil(v - ry), 0.0)
        y1 = min(math.floor(v + ry), height - 1.0)
        if x0 > x1 or y0 > y1:
            continue
        keep[i] = True
        geom[i, 0] = u
        geom[i, 1] = v
        geom[i, 2] = c11 / det
        geom[i, 3] = -c01 / det
        geom[i, 4] = c00 / det
        geom[i, 5] = z
        geom[i, 6] = x0
        geom[i, 7] = x1
        geom[i, 8] = y0
        geom[i, 9] = y1
        geom[i, 10] = r2 * (1.0 + 1e-9) + 1e-9
    return geom, keep


@numba.njit(cache=True)
def fix_ties(order, z):
    """Reorder runs of equal depth by index so the sort is (z, index)."""
    n = order.shape[0]
    i = 0
    while i < n:
        j = i + 1
        while j < n and z[order[j]] == z[order[i]]:
            j += 1
        if j - i > 1:
            order[i:j] = np.sort(order[i:j])
        i = j
    return order


@numba.njit(cache=True)
def colors_for(idx, means, sh, cam_center, n_coeffs):
    out = np.empty((idx.shape[0], 3))
    basis = np.empty(16)
    for k in range(idx.shape[0]):
        i = idx[k]
        dx = means[i, 0] - cam_center[0]
        dy = means[i, 1] - cam_center[1]
        dz = means[i, 2] - cam_center[2]
        nrm = math.sqrt(dx * dx + dy * dy + dz * dz)
        if nrm > 0.0:
            dx /= nrm
            dy /= nrm
            dz /= nrm
        sh_basis(dx, dy, dz, basis)
        for c in range(3):
            acc = 0.0
            for m in range(n_coeffs):
                acc += basis[m] * sh[i, m, c]
            acc += 0.5
            out[k, c] = min(max(acc, 0.0), 1.0)
    return out


@numba.njit(cache=True)
def bin_tiles(geom, tiles_x, tiles_y):
    """Per-tile lists of rows of the depth-sorted ``geom``, front to back."""
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for k in range(geom.shape[0]):
        g = geom[k]
        tx0 = int(g[6]) // TILE
        tx1 = int(g[7]) // TILE
        ty0 = int(g[8]) // TILE
        ty1 = int(g[9]) // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    for i in range(n_tiles):
        counts[i + 1] += counts[i]
    fill = counts[:-1].copy()
    entries = np.empty(counts[n_tiles], dtype=np.int64)
    for k in range(geom.shape[0]):
        g = geom[k]
        tx0 = int(g[6]) // TILE
        tx1 = int(g[7]) // TILE
        ty0 = int(g[8]) // TILE
        ty1 = int(g[9]) // TILE
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                tid = ty * tiles_x + tx
                entries[fill[tid]] = k
                fill[tid] += 1
    return counts, entries


@numba.njit(cache=True, error_model="numpy")
def _composite_tile(tid, tiles_x, width, height, counts, entries, geom, opac, colors,
                    alpha_max, alpha_min, t_min, depth_alpha_min, bg, near, far,
                    out_color, out_depth, out_alpha):
    px0 = (tid % tiles_x) * TILE
    py0 = (tid // tiles_x) * TILE
    px1 = min(px0 + TILE, width)
    py1 = min(py0 + TILE, height)
    n_pix = TILE * TILE
    T = np.ones(n_pix)
    # r, g, b, z per pixel; the weight sum is 1 - T (telescoping product)
    acc = np.zeros((n_pix, 4))
    remaining = (px1 - px0) * (py1 - py0)
    for e in range(counts[tid], counts[tid + 1]):
        if remaining == 0:
            break
        gi = entries[e]
        k = gi
        u = geom[gi, 0]
        v = geom[gi, 1]
        ca = geom[gi, 2]
        cb = geom[gi, 3]
        cc = geom[gi, 4]
        z = geom[gi, 5]
        r2 = geom[gi, 10]
        op = opac[gi]
        col_r = colors[k, 0]
        col_g = colors[k, 1]
        col_b = colors[k, 2]
        gx0 = max(int(geom[gi, 6]), px0)
        gx1 = min(int(geom[gi, 7]), px1 - 1)
        gy0 = max(int(geom[gi, 8]), py0)
        gy1 = min(int(geom[gi, 9]), py1 - 1)
        inv_ca = 1.0 / ca
        # power(dx+1) - power(dx) = -0.5 (ca (2 dx + 1) + 2 cb dy), second difference -ca
        step2 = math.exp(-ca)
        for py in range(gy0, gy1 + 1):
            dy = py - v
            # x-span of the ellipse ca dx^2 + 2 cb dx dy + cc dy^2 <= r2 on this row
            disc = cb * cb * dy * dy - ca * (cc * dy * dy - r2)
            if disc < 0.0:
                continue
            sq = math.sqrt(disc)
            rx0 = max(gx0, int(math.ceil(u + (-cb * dy - sq) * inv_ca - 1e-6)))
            rx1 = min(gx1, int(math.floor(u + (-cb * dy + sq) * inv_ca + 1e-6)))
            if rx0 > rx1:
                continue
            dx = rx0 - u
            gauss = math.exp(-0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy))
            # the first difference can be positive left of the center
            step = math.exp(-0.5 * (ca * (2.0 * dx + 1.0) + 2.0 * cb * dy))
            base = (py - py0) * TILE - px0
            for px in range(rx0, rx1 + 1):
                idx = base + px
                Tp = T[idx]
                alpha = op * gauss
                gauss *= step
                step *= step2
                if Tp < t_min:
                    continue
                if alpha > alpha_max:
                    alpha = alpha_max
                if alpha < alpha_min:
                    continue
                w = alpha * Tp
                acc[idx, 0] += w * col_r
                acc[idx, 1] += w * col_g
                acc[idx, 2] += w * col_b
                acc[idx, 3] += w * z
                Tp *= 1.0 - alpha
                T[idx] = Tp
                if Tp < t_min:
                    remaining -= 1
    for ly in range(py1 - py0):
        for lx in range(px1 - px0):
            idx = ly * TILE + lx
            Tp = T[idx]
            y = py0 + ly
            x = px0 + lx
            out_color[y, x, 0] = acc[idx, 0] + Tp * bg[0]
            out_color[y, x, 1] = acc[idx, 1] + Tp * bg[1]
            out_color[y, x, 2] = acc[idx, 2] + Tp * bg[2]
            a = 1.0 - Tp
            out_alpha[y, x] = a
            if a >= depth_alpha_min and a > 0.0:
                out_depth[y, x] = min(max(acc[idx, 3] / a, near), far)
            else:
                out_depth[y, x] = 0.0


@numba.njit(cache=True, parallel=True)
def composite(width, height, counts, entries, geom, opac, colors,
              alpha_max, alpha_min, t_min, depth_alpha_min, bg, near, far):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    out_color = np.empty((height, width, 3))
    out_depth = np.empty((height, width))
    out_alpha = np.empty((height, width))
    for tid in numba.prange(tiles_x * tiles_y):
        _composite_tile(tid, tiles_x, width, height, counts, entries, geom, opac, colors,
                        alpha_max, alpha_min, t_min, depth_alpha_min, bg, near, far,
                        out_color, out_depth, out_alpha)
    return out_color, out_depth, out_alpha


@numba.njit(cache=True)
def quantize_rgb8(color):
    """Round-half-up of clip(color, 0, 1) * 255 to uint8, element by element."""
    H, W, C = color.shape
    out = np.empty((H, W, C), dtype=np.uint8)
    for v in range(H):
        for u in range(W):
            for k in range(C):
                c = color[v, u, k]
                c = 0.0 if c < 0.0 else (1.0 if c > 1.0 else c)
                out[v, u, k] = np.uint8(math.floor(c * 255.0 + 0.5))
    return out
