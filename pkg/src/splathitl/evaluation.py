"""Absolute trajectory error: association, Umeyama alignment and error stats."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform


class InsufficientOverlapError(ValueError):
    pass


class DegenerateAlignmentError(ValueError):
    pass


class TrajectoryFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    timestamps_ns: np.ndarray
    positions: np.ndarray
    quats: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps_ns, dtype=np.int64).reshape(-1)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = np.asarray(self.quats, dtype=float).reshape(-1, 4) if self.quats is not None else None
        if q is None or len(q) == 0:
            q = np.tile([1.0, 0.0, 0.0, 0.0], (len(t), 1))
        if not (len(t) == len(p) == len(q)):
            raise TrajectoryFormatError("timestamps, positions and quaternions differ in length")
        if len(t) < 2:
            raise TrajectoryFormatError(f"a trajectory needs at least 2 samples, got {len(t)}")
        if np.any(np.diff(t) <= 0):
            raise TrajectoryFormatError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps_ns", t)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "quats", q)

    def __len__(self) -> int:
        return len(self.timestamps_ns)

    @classmethod
    def from_samples(cls, samples) -> "Trajectory":
        return cls([s.timestamp_ns for s in samples], [s.position for s in samples], [s.quat for s in samples])


def load_trajectory_csv(path) -> Trajectory:
    """Read ``t_ns,x,y,z,qw,qx,qy,qz`` rows (a header row is optional)."""
    ts, ps, qs = [], [], []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or (lineno == 1 and row[0].strip() == "t_ns"):
                continue
            if len(row) != 8:
                raise TrajectoryFormatError(f"{path}:{lineno}: expected 8 columns, got {len(row)}")
            try:
                ts.append(int(row[0]))
                vals = [float(v) for v in row[1:]]
            except ValueError as e:
                raise TrajectoryFormatError(f"{path}:{lineno}: {e}") from None
            if not np.all(np.isfinite(vals)):
                raise TrajectoryFormatError(f"{path}:{lineno}: non-finite value")
            ps.append(vals[:3])
            qs.append(vals[3:])
    try:
        return Trajectory(np.array(ts, dtype=np.int64), np.array(ps).reshape(-1, 3), np.array(qs).reshape(-1, 4))
    except TrajectoryFormatError as e:
        raise TrajectoryFormatError(f"{path}: {e}") from None


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> list[tuple[int, int]]:
    """One-to-one nearest-in-time pairs with |dt| <= max_dt, in time order.

    Candidate pairs are accepted greedily from the smallest |dt| upwards
    (ties by est index, then gt index), so no sample is used twice.
    """
    if not max_dt > 0:
        raise ValueError(f"max_dt must be positive, got {max_dt}")
    lim = int(round(max_dt * 1e9))
    te, tg = est.timestamps_ns, gt.timestamps_ns
    cands = []
    for i, t in enumerate(te):
        lo = np.searchsorted(tg, t - lim, side="left")
        hi = np.searchsorted(tg, t + lim, side="right")
        for j in range(lo, hi):
            cands.append((abs(int(tg[j]) - int(t)), i, j))
    cands.sort()
    used_e, used_g = set(), set()
    pairs = []
    for _, i, j in cands:
        if i in used_e or j in used_g:
            continue
        used_e.add(i)
        used_g.add(j)
        pairs.append((i, j))
    pairs.sort()
    if len(pairs) < 3:
        raise InsufficientOverlapError(f"only {len(pairs)} associated pairs within {max_dt} s (need 3)")
    return pairs


@dataclass(frozen=True)
class Similarity:
    scale: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, p) -> np.ndarray:
        return self.scale * np.asarray(p, dtype=float) @ self.R.T + self.t

    @property
    def rigid(self) -> RigidTransform:
        return RigidTransform(self.R, self.t)


def umeyama_align(src, dst, with_scale: bool = False) -> Similarity:
    """Least-squares s, R, t with dst ~ s R src + t and det(R) = +1."""
    X = np.asarray(src, dtype=float).reshape(-1, 3)
    Y = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(X) != len(Y):
        raise ValueError("src and dst differ in length")
    if len(X) < 3:
        raise DegenerateAlignmentError(f"need at least 3 point pairs, got {len(X)}")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * max(1.0, sv[0]):
        raise DegenerateAlignmentError("points are collinear or coincident")
    C = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var = (Xc ** 2).sum() / len(X)
        s = float(np.trace(np.diag(D) @ S) / var)
    else:
        s = 1.0
    t = my - s * R @ mx
    return Similarity(s, R, t)


@dataclass(frozen=True)
class AteReport:
    rmse_m: float
    max_m: float
    mean_m: float
    n_pairs: int
    alignment: Similarity

    def as_dict(self) -> dict:
        return {
            "rmse_m": self.rmse_m,
            "max_m": self.max_m,
            "mean_m": self.mean_m,
            "n_pairs": self.n_pairs,
            "alignment": {"scale": self.alignment.scale, "R": self.alignment.R.tolist(),
                          "t": self.alignment.t.tolist()},
        }


def compute_ate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02, with_scale: bool = False) -> AteReport:
    pairs = np.array(associate(est, gt, max_dt))
    P = est.positions[pairs[:, 0]]
    G = gt.positions[pairs[:, 1]]
    A = umeyama_align(P, G, with_scale)
    err = np.linalg.norm(A.apply(P) - G, axis=1)
    return AteReport(float(np.sqrt(np.mean(err ** 2))), float(err.max()), float(err.mean()), len(pairs), A)
