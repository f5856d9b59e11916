"""Independent reference implementations used as test oracles.

Nothing here imports the renderer kernels; each oracle recomputes its
answer from first principles with plain numpy loops.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import sph_harm_y


def quat_matrix(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    # rotation of a vector by q (v' = q v q*) applied to the basis vectors
    def rot(v):
        u = np.array([x, y, z])
        return v + 2 * w * np.cross(u, v) + 2 * np.cross(u, np.cross(u, v))
    return np.column_stack([rot(e) for e in np.eye(3)])


def covariance(scale, q):
    R = quat_matrix(q)
    return R @ np.diag(np.asarray(scale) ** 2) @ R.T


def real_sh_table(direction, degree=3):
    """Real SH basis in the ordering and signs used by splat exporters.

    Built from scipy's complex harmonics (which carry the Condon-Shortley
    phase): m > 0 is sqrt(2) Re Y_l^m, m < 0 is sqrt(2) Im Y_l^|m|, m = 0 is Y_l^0.
    """
    x, y, z = direction
    theta = math.acos(max(-1.0, min(1.0, z)))
    phi = math.atan2(y, x)
    out = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            Y = sph_harm_y(l, abs(m), theta, phi)
            if m > 0:
                val = math.sqrt(2) * Y.real
            elif m < 0:
                val = math.sqrt(2) * Y.imag
            else:
                val = Y.real
            out.append(val)
    return np.array(out)


def project(mean, cov3, R, t, K, dilation=0.3):
    """EWA projection with the linearization guard, or None if outside [near, far]."""
    p = R @ mean + t
    x, y, z = p
    if z < K.near or z > K.far:
        return None
    limx = 1.3 * 0.5 * K.width / K.fx
    limy = 1.3 * 0.5 * K.height / K.fy
    tx = min(max(x / z, -limx), limx)
    ty = min(max(y / z, -limy), limy)
    J = np.array([[K.fx / z, 0, -K.fx * tx / z], [0, K.fy / z, -K.fy * ty / z]])
    cov2 = J @ R @ cov3 @ R.T @ J.T + dilation * np.eye(2)
    center = np.array([K.cx + K.fx * x / z, K.cy + K.fy * y / z])
    return center, cov2, z


def brute_force_render(scene, cam_pose, K, background=(0, 0, 0), alpha_max=0.99, alpha_min=1 / 255,
                       depth_alpha_min=0.5, basis=None):
    """Every Gaussian at every pixel in (z, index) order; no tiling, culling or early stop."""
    Rwc = cam_pose.R.T
    twc = -Rwc @ cam_pose.position
    items = []
    for i in range(len(scene)):
        g = scene[i]
        pr = project(g.mean, covariance(g.scale, g.rotation), Rwc, twc, K)
        if pr is None:
            continue
        center, cov2, z = pr
        d = g.mean - cam_pose.position
        d = d / np.linalg.norm(d)
        table = real_sh_table(d) if basis is None else basis(d)
        color = np.clip(0.5 + table @ g.sh, 0.0, 1.0)
        items.append((z, i, center, np.linalg.inv(cov2), g.opacity, color))
    items.sort(key=lambda it: (it[0], it[1]))
    H, W = K.height, K.width
    rgb = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    bg = np.asarray(background, dtype=float)
    for v in range(H):
        for u in range(W):
            T = 1.0
            c = np.zeros(3)
            zw = 0.0
            ws = 0.0
            for z, _, center, conic, op, color in items:
                d = np.array([u, v]) - center
                a = min(alpha_max, op * math.exp(-0.5 * d @ conic @ d))
                if a < alpha_min:
                    continue
                w = a * T
                c += w * color
                zw += w * z
                ws += w
                T *= 1 - a
            rgb[v, u] = c + T * bg
            if 1 - T >= depth_alpha_min and ws > 0:
                depth[v, u] = min(max(zw / ws, K.near), K.far)
    return rgb, depth


def collision_full_scan(grid, center, radius):
    occ = np.argwhere(grid.occupied)
    if len(occ) == 0:
        return False
    centers = grid.origin + (occ + 0.5) * grid.voxel_size
    return bool(np.any(np.linalg.norm(centers - np.asarray(center), axis=1) <= radius))


def associate_exhaustive(te, tg, max_dt_ns):
    """Greedy smallest-|dt| one-to-one matching by enumerating all pairs."""
    cands = sorted((abs(int(b) - int(a)), i, j) for i, a in enumerate(te) for j, b in enumerate(tg)
                   if abs(int(b) - int(a)) <= max_dt_ns)
    ue, ug, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in ue and j not in ug:
            ue.add(i)
            ug.add(j)
            pairs.append((i, j))
    return sorted(pairs)
