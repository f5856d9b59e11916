"""Static voxel occupancy, geofence and the rotating-hand dynamic window.

The static grid is built once from splat means; the dynamic window is
evaluated on demand from the current time, so nothing here is mutated after
construction.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Pose6D, RigidTransform
from .renderer.camera import CameraIntrinsics, FrameRGBD

TWO_PI = 2.0 * math.pi


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class OccupancyGrid:
    origin: np.ndarray
    voxel_size: float
    occupied: np.ndarray  # bool, shape dims (x, y, z)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        occ = np.asarray(self.occupied, dtype=bool)
        if occ.ndim != 3 or min(occ.shape) < 1:
            raise GridError(f"occupancy must be a non-empty 3D array, got shape {occ.shape}")
        if not (self.voxel_size > 0 and math.isfinite(self.voxel_size)):
            raise GridError(f"voxel_size must be positive, got {self.voxel_size}")
        occ.setflags(write=False)
        object.__setattr__(self, "occupied", occ)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.occupied.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.voxel_size * np.asarray(self.dims)

    def index(self, p) -> np.ndarray:
        """Integer voxel coordinates of point(s) ``p`` (may lie outside the grid)."""
        p = np.asarray(p, dtype=float)
        return np.floor((p - self.origin) / self.voxel_size).astype(np.int64)

    def center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.voxel_size

    def count(self) -> int:
        return int(self.occupied.sum())


def build_grid(points, voxel_size: float = 0.1, padding: float = 0.0) -> OccupancyGrid:
    """Occupancy grid over the padded AABB of ``points``; a voxel is occupied
    iff at least one point falls inside it."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise GridError("cannot build a grid from an empty point list")
    if not (voxel_size > 0):
        raise GridError(f"voxel_size must be positive, got {voxel_size}")
    if padding < 0:
        raise GridError(f"padding must be non-negative, got {padding}")
    lo = pts.min(axis=0) - padding
    hi = pts.max(axis=0) + padding
    dims = np.floor((hi - lo) / voxel_size).astype(np.int64) + 1
    idx = np.floor((pts - lo) / voxel_size).astype(np.int64)
    idx = np.minimum(idx, dims - 1)  # guards the max point against rounding
    occ = np.zeros(tuple(dims), dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return OccupancyGrid(lo, float(voxel_size), occ)


def check_collision(grid: OccupancyGrid, center, radius: float) -> bool:
    """True iff an occupied voxel has its center within ``radius`` of ``center``.

    Only voxels inside the sphere's bounding box are visited.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    c = np.asarray(center, dtype=float)
    vs = grid.voxel_size
    # voxel i has center origin + (i + 0.5) vs; keep i whose center is within the box
    lo = np.ceil((c - radius - grid.origin) / vs - 0.5).astype(np.int64)
    hi = np.floor((c + radius - grid.origin) / vs - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(grid.dims) - 1)
    if np.any(hi < lo):
        return False
    sub = grid.occupied[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    if not sub.any():
        return False
    ii, jj, kk = np.nonzero(sub)
    centers = grid.origin + (np.stack([ii + lo[0], jj + lo[1], kk + lo[2]], axis=1) + 0.5) * vs
    d2 = np.sum((centers - c) ** 2, axis=1)
    return bool(np.any(d2 <= radius * radius))


_GRID_HEADER = struct.Struct("<4d3I")


def export_grid(grid: OccupancyGrid, path) -> None:
    """Debug dump: origin, voxel size, dims, then occupancy bits with x fastest."""
    bits = np.packbits(grid.occupied.ravel(order="F"), bitorder="little")
    with open(path, "wb") as f:
        f.write(_GRID_HEADER.pack(*grid.origin, grid.voxel_size, *grid.dims))
        f.write(bits.tobytes())


def import_grid(path) -> OccupancyGrid:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _GRID_HEADER.size:
        raise GridError(f"{path}: file shorter than grid header")
    ox, oy, oz, vs, nx, ny, nz = _GRID_HEADER.unpack_from(data)
    n = nx * ny * nz
    body = np.frombuffer(data, dtype=np.uint8, offset=_GRID_HEADER.size)
    if len(body) != (n + 7) // 8:
        raise GridError(f"{path}: expected {(n + 7) // 8} payload bytes, got {len(body)}")
    occ = np.unpackbits(body, bitorder="little", count=n).astype(bool).reshape((nx, ny, nz), order="F")
    return OccupancyGrid(np.array([ox, oy, oz]), vs, occ)


@dataclass(frozen=True)
class Geofence:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=float).reshape(3)
        hi = np.asarray(self.max_corner, dtype=float).reshape(3)
        if not np.all(lo < hi):
            raise ValueError(f"geofence min {lo} must be below max {hi} on every axis")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)


def check_geofence(fence: Geofence, p) -> bool:
    """True when ``p`` is inside the closed box, False on violation."""
    p = np.asarray(p, dtype=float)
    return bool(np.all(p >= fence.min_corner) and np.all(p <= fence.max_corner))


@dataclass(frozen=True)
class DynamicWindow:
    """Rectangular window in the plane z=0 of ``pose`` with a rotating hand.

    ``pose`` maps window-plane coordinates to world. Angle 0 points along the
    plane's local x axis (horizontal), angles grow towards local y (up). The
    border is a frame of ``border_width`` just outside the aperture.
    """

    pose: RigidTransform
    half_extents: tuple[float, float]
    hand_length: float
    hand_width: float
    omega: float
    theta0: float = 0.0
    border_width: float = 0.1

    def __post_init__(self):
        hx, hy = (float(v) for v in self.half_extents)
        object.__setattr__(self, "half_extents", (hx, hy))
        if hx <= 0 or hy <= 0:
            raise ValueError("window half-extents must be positive")
        if not (0 < self.hand_length <= min(hx, hy)):
            raise ValueError(f"hand_length {self.hand_length} must be in (0, {min(hx, hy)}]")
        if not self.hand_width > 0:
            raise ValueError("hand_width must be positive")
        if not math.isfinite(self.omega):
            raise ValueError("omega must be finite")
        if self.border_width < 0:
            raise ValueError("border_width must be non-negative")

    @property
    def period(self) -> float:
        return TWO_PI / abs(self.omega) if self.omega else math.inf

    def to_plane(self, p) -> np.ndarray:
        """World point(s) -> window-plane coordinates (local z = signed distance)."""
        return self.pose.inverse().apply(p)


def hand_angle(w: DynamicWindow, t: float) -> float:
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    a = math.fmod(w.theta0 + w.omega * t, TWO_PI)
    if a < 0:
        a += TWO_PI
    return 0.0 if a >= TWO_PI else a


def in_hand(w: DynamicWindow, xy, t: float) -> np.ndarray | bool:
    """Whether plane point(s) ``xy`` lie on the hand rectangle at time ``t``."""
    a = hand_angle(w, t)
    xy = np.asarray(xy, dtype=float)
    s = xy[..., 0] * math.cos(a) + xy[..., 1] * math.sin(a)
    n = -xy[..., 0] * math.sin(a) + xy[..., 1] * math.cos(a)
    return (s >= 0.0) & (s <= w.hand_length) & (np.abs(n) <= 0.5 * w.hand_width)


def in_aperture(w: DynamicWindow, xy) -> np.ndarray | bool:
    xy = np.asarray(xy, dtype=float)
    hx, hy = w.half_extents
    return (np.abs(xy[..., 0]) <= hx) & (np.abs(xy[..., 1]) <= hy)


def _cell_overlaps_hand(w: DynamicWindow, cx, cy, half: float, a: float) -> np.ndarray:
    """Separating-axis test between axis-aligned cells and the hand rectangle."""
    ux, uy = math.cos(a), math.sin(a)
    L, hw = w.hand_length, 0.5 * w.hand_width
    # hand rectangle: center along u at L/2, half sizes (L/2, hw) along (u, n)
    hcx, hcy = 0.5 * L * ux, 0.5 * L * uy
    ex = 0.5 * L * abs(ux) + hw * abs(uy)
    ey = 0.5 * L * abs(uy) + hw * abs(ux)
    sep = (np.abs(cx - hcx) > half + ex) | (np.abs(cy - hcy) > half + ey)
    # hand axes
    dx, dy = cx - hcx, cy - hcy
    proj_u = np.abs(dx * ux + dy * uy)
    proj_n = np.abs(-dx * uy + dy * ux)
    cell_r_u = half * (abs(ux) + abs(uy))
    sep |= proj_u > 0.5 * L + cell_r_u
    sep |= proj_n > hw + cell_r_u
    return ~sep


def dynamic_occupancy(w: DynamicWindow, t: float, voxel_size: float) -> np.ndarray:
    """Occupied cells of the window at time ``t`` as integer plane coordinates.

    Cell (i, j) is the square of side ``voxel_size`` centered at
    (i, j) * voxel_size in the window plane. A cell is occupied when it
    overlaps the hand or the border ring. Returns an (M, 2) int array sorted
    lexicographically.
    """
    if not voxel_size > 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    hx, hy = w.half_extents
    bw = w.border_width
    nx = int(math.ceil((hx + bw) / voxel_size)) + 1
    ny = int(math.ceil((hy + bw) / voxel_size)) + 1
    ii, jj = np.meshgrid(np.arange(-nx, nx + 1), np.arange(-ny, ny + 1), indexing="ij")
    cx = ii * voxel_size
    cy = jj * voxel_size
    half = 0.5 * voxel_size
    occ = _cell_overlaps_hand(w, cx, cy, half, hand_angle(w, t))
    if bw > 0:
        # ring between the aperture and the outer border rectangle
        in_outer = (np.abs(cx) - half < hx + bw) & (np.abs(cy) - half < hy + bw)
        inside_aperture = (np.abs(cx) + half <= hx) & (np.abs(cy) + half <= hy)
        occ |= in_outer & ~inside_aperture
    return np.stack([ii[occ], jj[occ]], axis=1)


def window_collision(w: DynamicWindow, t: float, center, radius: float, voxel_size: float) -> bool:
    """True if a dynamic cell center lies within ``radius`` of ``center``.

    Cells are treated as voxels of thickness ``voxel_size`` centered on the
    window plane, matching the static grid's voxel-center rule.
    """
    local = w.to_plane(center)
    if abs(local[2]) > radius:
        return False
    cells = dynamic_occupancy(w, t, voxel_size)
    if len(cells) == 0:
        return False
    pts = cells * voxel_size
    d2 = (pts[:, 0] - local[0]) ** 2 + (pts[:, 1] - local[1]) ** 2 + local[2] ** 2
    return bool(np.any(d2 <= radius * radius))


def hand_corners(w: DynamicWindow, t: float) -> np.ndarray:
    """The hand rectangle's 4 corners in plane coordinates (x, y)."""
    a = hand_angle(w, t)
    u = np.array([math.cos(a), math.sin(a)])
    n = np.array([-u[1], u[0]])
    hw = 0.5 * w.hand_width
    L = w.hand_length
    return np.array([-hw * n, L * u - hw * n, L * u + hw * n, hw * n])


def plane_homography(cam_pose: Pose6D, K: CameraIntrinsics, w: DynamicWindow) -> np.ndarray:
    """H = K [r1 r2 t] mapping plane (x, y, 1) to homogeneous pixels."""
    cam_from_plane = cam_pose.world_to_local() @ w.pose
    Rm, t = cam_from_plane.R, cam_from_plane.t
    return K.K @ np.column_stack([Rm[:, 0], Rm[:, 1], t])


def apply_homography(H: np.ndarray, xy) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    h = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1) @ H.T
    return h[..., :2] / h[..., 2:3]


@dataclass(frozen=True)
class OverlayStyle:
    color: tuple[int, int, int] = (255, 40, 40)


def overlay_hand(frame: FrameRGBD, cam_pose: Pose6D, K: CameraIntrinsics, w: DynamicWindow,
                 t: float, style: OverlayStyle | None = None) -> FrameRGBD:
    """Paint the hand into ``frame`` where the window plane is nearer than the scene.

    Each pixel is mapped back to the plane with H^-1; for the plane point
    X = R (x, y, 0) + t the third component of H^-1 (u, v, 1) is 1 / z_cam, so
    its sign tells whether the pixel ray hits the plane in front of the camera.
    """
    style = style or OverlayStyle()
    H = plane_homography(cam_pose, K, w)
    out = frame.copy()
    if abs(np.linalg.det(H)) < 1e-12:
        return out  # camera center lies in the plane; the hand is edge-on
    Hinv = np.linalg.inv(H)
    v, u = np.mgrid[0:K.height, 0:K.width].astype(float)
    q = np.stack([u, v, np.ones_like(u)], axis=-1) @ Hinv.T
    inv_z = q[..., 2]
    front = inv_z > 0
    if not front.any():
        return out
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = q[..., :2] / inv_z[..., None]
        z = 1.0 / inv_z
    mask = front & in_hand(w, np.where(front[..., None], xy, 1e30), t) & (z >= K.near) & (z <= K.far)
    if out.depth is not None:
        d = out.depth
        mask &= (d <= 0.0) | (z < d)
        out.depth[mask] = z[mask].astype(np.float32)
    out.rgb[mask] = np.asarray(style.color, dtype=np.uint8)
    return out
