"""Gaussian-splat scenes: binary PLY I/O, activations and point-cloud export.

The on-disk layout is the usual trained-splat export: one ``vertex`` element
with float properties ``x y z nx ny nz f_dc_0..2 f_rest_0..44 opacity
scale_0..2 rot_0..3``. Scales are stored as logs, opacities as logits, and
``f_rest`` is channel-major (15 coefficients for R, then G, then B).
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .geometry import quat_to_matrix

SH_COEFFS = 16
N_REST = 3 * (SH_COEFFS - 1)

PROPERTY_NAMES = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    + [f"f_rest_{i}" for i in range(N_REST)]
    + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
)
REQUIRED = [n for n in PROPERTY_NAMES if n not in ("nx", "ny", "nz")]

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


class SceneFormatError(ValueError):
    pass


class SceneTruncatedError(SceneFormatError):
    def __init__(self, offset: int, expected: int, got: int):
        super().__init__(
            f"payload truncated at byte offset {offset}: expected {expected} bytes, got {got}"
        )
        self.offset = offset


class SceneDataError(SceneFormatError):
    def __init__(self, index: int, what: str):
        super().__init__(f"record {index}: {what}")
        self.index = index


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian3D:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    opacity: float
    sh: np.ndarray  # (16, 3)

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=float)
        if not (np.all(np.isfinite(scale)) and np.all(scale > 0)):
            raise ValueError(f"scale must be positive and finite, got {scale}")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError(f"opacity must be in (0, 1), got {self.opacity}")
        q = np.asarray(self.rotation, dtype=float)
        object.__setattr__(self, "rotation", q / np.linalg.norm(q))
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "sh", np.asarray(self.sh, dtype=float).reshape(SH_COEFFS, 3))


def covariance_of(g: Gaussian3D) -> np.ndarray:
    """World-space covariance ``R diag(scale)^2 R^T``."""
    M = quat_to_matrix(g.rotation) * g.scale  # R @ diag(scale)
    cov = M @ M.T
    return 0.5 * (cov + cov.T)


class SplatScene:
    """Immutable struct-of-arrays view over a set of Gaussians.

    Arrays are float64: ``means (N,3)``, ``scales (N,3)``, ``rotations (N,4)``
    (unit, w first), ``opacities (N,)``, ``sh (N,16,3)``.
    """

    def __init__(self, means, scales, rotations, opacities, sh):
        self.means = np.ascontiguousarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(n, 3)
        rot = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        norms = np.linalg.norm(rot, axis=1, keepdims=True)
        self.rotations = np.ascontiguousarray(rot / np.where(norms > 0, norms, 1.0))
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64).reshape(n)
        self.sh = np.ascontiguousarray(sh, dtype=np.float64).reshape(n, SH_COEFFS, 3)
        for a in (self.means, self.scales, self.rotations, self.opacities, self.sh):
            a.setflags(write=False)

    @classmethod
    def empty(cls) -> "SplatScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 16, 3)))

    @classmethod
    def from_gaussians(cls, gaussians) -> "SplatScene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            [g.mean for g in gaussians],
            [g.scale for g in gaussians],
            [g.rotation for g in gaussians],
            [g.opacity for g in gaussians],
            [g.sh for g in gaussians],
        )

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i], self.scales[i], self.rotations[i], float(self.opacities[i]), self.sh[i])

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [self[i] for i in range(len(self))]

    @cached_property
    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        return self.means.min(axis=0), self.means.max(axis=0)

    @cached_property
    def sh_coeffs_used(self) -> int:
        """Coefficients per channel up to the highest SH band with a nonzero term (1, 4, 9 or 16)."""
        for degree in (3, 2, 1):
            if np.any(self.sh[:, degree * degree:(degree + 1) ** 2, :]):
                return (degree + 1) ** 2
        return 1

    @cached_property
    def covariances(self) -> np.ndarray:
        """Upper-triangle covariance terms (xx, xy, xz, yy, yz, zz), shape (N, 6)."""
        w, x, y, z = self.rotations.T
        R = np.empty((len(self), 3, 3))
        R[:, 0, 0] = 1 - 2 * (y * y + z * z)
        R[:, 0, 1] = 2 * (x * y - z * w)
        R[:, 0, 2] = 2 * (x * z + y * w)
        R[:, 1, 0] = 2 * (x * y + z * w)
        R[:, 1, 1] = 1 - 2 * (x * x + z * z)
        R[:, 1, 2] = 2 * (y * z - x * w)
        R[:, 2, 0] = 2 * (x * z - y * w)
        R[:, 2, 1] = 2 * (y * z + x * w)
        R[:, 2, 2] = 1 - 2 * (x * x + y * y)
        M = R * self.scales[:, None, :]
        C = M @ M.transpose(0, 2, 1)
        out = np.stack([C[:, 0, 0], C[:, 0, 1], C[:, 0, 2], C[:, 1, 1], C[:, 1, 2], C[:, 2, 2]], axis=1)
        out.setflags(write=False)
        return out


def _parse_header(f, path) -> tuple[int, list[tuple[str, str]], int]:
    first = f.readline()
    if first.strip() != b"ply":
        raise SceneFormatError(f"{path}: not a PLY file")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        raw = f.readline()
        if not raw:
            raise SceneFormatError(f"{path}: header has no end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else ""
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif count is not None:
                raise SceneFormatError(f"{path}: unsupported element '{parts[1]}'")
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise SceneFormatError(f"{path}: list properties are not supported")
            if parts[1] not in _PLY_TYPES:
                raise SceneFormatError(f"{path}: unsupported property type '{parts[1]}'")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise SceneFormatError(f"{path}: format must be binary_little_endian, got {fmt!r}")
    if count is None:
        raise SceneFormatError(f"{path}: missing 'element vertex'")
    names = {n for n, _ in props}
    for name in REQUIRED:
        if name not in names:
            raise SceneFormatError(f"{path}: missing vertex property '{name}'")
    return count, props, f.tell()


def load_scene(path) -> SplatScene:
    """Read a binary little-endian splat PLY and apply activations."""
    with open(path, "rb") as f:
        count, props, offset = _parse_header(f, path)
        dtype = np.dtype(props)
        expected = count * dtype.itemsize
        payload = f.read(expected)
    if len(payload) < expected:
        # offset of the first missing byte
        raise SceneTruncatedError(offset + len(payload), expected, len(payload))
    rec = np.frombuffer(payload, dtype=dtype, count=count)

    def cols(names):
        return np.stack([rec[n].astype(np.float64) for n in names], axis=1) if count else np.zeros((0, len(names)))

    means = cols(["x", "y", "z"])
    dc = cols(["f_dc_0", "f_dc_1", "f_dc_2"])
    rest = cols([f"f_rest_{i}" for i in range(N_REST)])
    opac_raw = rec["opacity"].astype(np.float64)
    scale_raw = cols(["scale_0", "scale_1", "scale_2"])
    rot = cols(["rot_0", "rot_1", "rot_2", "rot_3"])

    raw = np.concatenate([means, dc, rest, opac_raw[:, None], scale_raw, rot], axis=1)
    bad = ~np.all(np.isfinite(raw), axis=1)
    if bad.any():
        raise SceneDataError(int(np.argmax(bad)), "non-finite value")
    rnorm = np.linalg.norm(rot, axis=1)
    if np.any(rnorm < 1e-12):
        raise SceneDataError(int(np.argmax(rnorm < 1e-12)), "zero-norm rotation")

    sh = np.empty((count, SH_COEFFS, 3))
    sh[:, 0, :] = dc
    # channel-major: rest[:, c*15 + k] is coefficient k+1 of channel c
    sh[:, 1:, :] = rest.reshape(count, 3, SH_COEFFS - 1).transpose(0, 2, 1)
    scales = np.exp(scale_raw)
    # saturated logits would hit exactly 0 or 1 in float64
    opacities = np.clip(_sigmoid(opac_raw), 1e-12, 1.0 - 1e-12)
    bad = ~np.all(np.isfinite(scales) & (scales > 0), axis=1)
    if bad.any():
        raise SceneDataError(int(np.argmax(bad)), "scale out of range after exp")
    return SplatScene(means, scales, rot, opacities, sh)


def write_scene(scene: SplatScene, path) -> None:
    """Write ``scene`` in the canonical 62-float layout (inverse activations)."""
    n = len(scene)
    data = np.zeros((n, len(PROPERTY_NAMES)), dtype=np.float64)
    data[:, 0:3] = scene.means
    data[:, 6:9] = scene.sh[:, 0, :]
    data[:, 9:9 + N_REST] = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, N_REST)
    data[:, 54] = _logit(scene.opacities)
    data[:, 55:58] = np.log(scene.scales)
    data[:, 58:62] = scene.rotations
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PROPERTY_NAMES]
    header += ["end_header"]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.astype("<f4").tobytes())
    os.replace(tmp, path)


def export_pointcloud(scene: SplatScene, opacity_min: float = 0.5) -> np.ndarray:
    """Means of the Gaussians with ``opacity >= opacity_min``, in scene order."""
    if not 0.0 <= opacity_min < 1.0:
        raise ValueError(f"opacity_min must be in [0, 1), got {opacity_min}")
    return scene.means[scene.opacities >= opacity_min].copy()


# --- synthetic scenes ---------------------------------------------------------

def random_scene(n: int, rng: np.random.Generator, *, center=(0.0, 0.0, 3.0), spread=1.0,
                 scale_range=(0.02, 0.3), sh_degree: int = 3) -> SplatScene:
    """Unstructured random Gaussians around ``center``; used for tests."""
    means = np.asarray(center) + rng.uniform(-spread, spread, size=(n, 3))
    scales = np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), size=(n, 3)))
    rot = rng.normal(size=(n, 4))
    opac = rng.uniform(0.05, 0.99, size=n)
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0, :] = rng.normal(0, 1.0, size=(n, 3))
    k = (sh_degree + 1) ** 2
    sh[:, 1:k, :] = rng.normal(0, 0.2, size=(n, k - 1, 3))
    return SplatScene(means, scales, rot, opac, sh)


def room_scene(n: int, rng: np.random.Generator, *, size=(11.0, 4.5, 3.65), n_pillars: int = 6,
               thickness: float = 0.01) -> SplatScene:
    """Surface-splat model of a box room with a few pillars.

    Gaussians are flat discs tangent to the walls, floor, ceiling and pillar
    faces, sized from the local sample density so the surfaces close up.
    The default extents are those of an indoor netted flight space.
    """
    size = np.asarray(size, dtype=float)
    pillars = []
    for _ in range(n_pillars):
        c = rng.uniform([1.5, 0.8], [size[0] - 1.5, size[1] - 0.8])
        hw = rng.uniform(0.15, 0.35, size=2)
        pillars.append((c, hw))

    # faces: (origin, u, v, normal-axis)
    faces = []
    X, Y, Z = size
    faces += [((0, 0, 0), (X, 0, 0), (0, Y, 0), 2), ((0, 0, Z), (X, 0, 0), (0, Y, 0), 2)]
    faces += [((0, 0, 0), (X, 0, 0), (0, 0, Z), 1), ((0, Y, 0), (X, 0, 0), (0, 0, Z), 1)]
    faces += [((0, 0, 0), (0, Y, 0), (0, 0, Z), 0), ((X, 0, 0), (0, Y, 0), (0, 0, Z), 0)]
    for c, hw in pillars:
        x0, x1 = c[0] - hw[0], c[0] + hw[0]
        y0, y1 = c[1] - hw[1], c[1] + hw[1]
        faces += [((x0, y0, 0), (x1 - x0, 0, 0), (0, 0, Z), 1), ((x0, y1, 0), (x1 - x0, 0, 0), (0, 0, Z), 1)]
        faces += [((x0, y0, 0), (0, y1 - y0, 0), (0, 0, Z), 0), ((x1, y0, 0), (0, y1 - y0, 0), (0, 0, Z), 0)]
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v, _ in faces])
    counts = np.floor(n * areas / areas.sum()).astype(int)
    counts[: n - counts.sum()] += 1
    spacing = np.sqrt(areas.sum() / n)

    means, scales, rots, cols = [], [], [], []
    palette = rng.uniform(-1.2, 1.2, size=(len(faces), 3))
    for (o, u, v, axis), k, base in zip(faces, counts, palette):
        if k == 0:
            continue
        a, b = rng.uniform(size=(2, k))
        p = np.asarray(o, float) + a[:, None] * np.asarray(u, float) + b[:, None] * np.asarray(v, float)
        means.append(p)
        s = np.full((k, 3), 0.4 * spacing)
        s[:, axis] = thickness
        scales.append(s)
        yaw = rng.uniform(0, np.pi, size=k) if axis == 2 else np.zeros(k)
        rots.append(np.stack([np.cos(yaw / 2), np.zeros(k), np.zeros(k), np.sin(yaw / 2)], axis=1))
        checker = ((np.floor(a * 8) + np.floor(b * 8)) % 2)[:, None] * 0.8
        cols.append(base + checker + rng.normal(0, 0.1, size=(k, 3)))
    means = np.concatenate(means)
    sh = np.zeros((len(means), SH_COEFFS, 3))
    sh[:, 0, :] = np.concatenate(cols)
    sh[:, 1:4, :] = rng.normal(0, 0.05, size=(len(means), 3, 3))
    opac = rng.uniform(0.6, 0.95, size=len(means))
    return SplatScene(means, np.concatenate(scales), np.concatenate(rots), opac, sh)
