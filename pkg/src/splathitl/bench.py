"""Render throughput measurement and the Gaussian-count scaling table."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import Pose6D, camera_pose, front_extrinsic, yaw_quat
from .renderer import CameraIntrinsics, RenderSettings, render
from .splat_scene import SplatScene, room_scene

DEFAULT_TIERS = (10_000, 50_000, 200_000)
TARGET_HZ = 100.0


@dataclass(frozen=True)
class BenchResult:
    n_gaussians: int
    width: int
    height: int
    frames: int
    hz: float
    p50_ms: float
    p99_ms: float

    def as_dict(self) -> dict:
        return asdict(self)


def random_poses(scene: SplatScene, n: int, rng: np.random.Generator, margin: float = 0.3) -> list[Pose6D]:
    """Level body poses uniformly inside the scene AABB (shrunk by ``margin``)."""
    lo, hi = scene.aabb
    lo = lo + np.minimum(margin, (hi - lo) / 4)
    hi = hi - np.minimum(margin, (hi - lo) / 4)
    pos = rng.uniform(lo, hi, size=(n, 3))
    yaw = rng.uniform(0.0, 2 * np.pi, size=n)
    return [Pose6D(p, yaw_quat(y)) for p, y in zip(pos, yaw)]


def run_bench(scene: SplatScene, K: CameraIntrinsics, n_frames: int = 200, seed: int = 0,
              settings: RenderSettings = RenderSettings(), warmup: int = 3) -> BenchResult:
    """Render ``n_frames`` RGBD frames from random poses; frame time includes quantization."""
    if n_frames < 1:
        raise ValueError("n_frames must be positive")
    rng = np.random.default_rng(seed)
    ext = front_extrinsic()
    if len(scene):
        poses = random_poses(scene, n_frames + warmup, rng)
    else:
        poses = [Pose6D(np.zeros(3)) for _ in range(n_frames + warmup)]
    for p in poses[:warmup]:
        render(scene, camera_pose(p, ext), K, settings)
    times = np.empty(n_frames)
    for i, p in enumerate(poses[warmup:]):
        t0 = time.perf_counter()
        render(scene, camera_pose(p, ext), K, settings)
        times[i] = time.perf_counter() - t0
    return BenchResult(len(scene), K.width, K.height, n_frames, float(n_frames / times.sum()),
                       float(np.percentile(times, 50) * 1e3), float(np.percentile(times, 99) * 1e3))


def scaling_table(tiers=DEFAULT_TIERS, width: int = 320, height: int = 240, hfov_deg: float = 90.0,
                  n_frames: int = 100, seed: int = 0) -> list[BenchResult]:
    K = CameraIntrinsics.from_fov(width, height, hfov_deg)
    out = []
    for n in tiers:
        scene = room_scene(int(n), np.random.default_rng(seed))
        out.append(run_bench(scene, K, n_frames, seed))
    return out


def format_table(rows: list[BenchResult], target_hz: float = TARGET_HZ) -> str:
    lines = [f"{'gaussians':>10} {'res':>9} {'Hz':>8} {'p50 ms':>8} {'p99 ms':>8}  >= {target_hz:g} Hz"]
    for r in rows:
        ok = "yes" if r.hz >= target_hz else "no"
        lines.append(f"{r.n_gaussians:>10} {r.width:>4}x{r.height:<4} {r.hz:>8.1f} {r.p50_ms:>8.2f} "
                     f"{r.p99_ms:>8.2f}  {ok}")
    return "\n".join(lines)
