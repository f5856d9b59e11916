from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Pose6D, RigidTransform, camera_pose, is_rotation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("fx and fy must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.width < 8 or self.height < 8:
            raise ValueError("width and height must be >= 8")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float, **kw) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height, **kw)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame rays (x/z, y/z, 1) for every pixel center, shape (H, W, 3)."""
        u = (np.arange(self.width) - self.cx) / self.fx
        v = (np.arange(self.height) - self.cy) / self.fy
        rays = np.ones((self.height, self.width, 3))
        rays[..., 0] = u[None, :]
        rays[..., 1] = v[:, None]
        return rays


@dataclass(frozen=True)
class Sensor:
    id: str
    intrinsics: CameraIntrinsics
    extrinsic: RigidTransform = field(default_factory=RigidTransform)  # body -> camera

    def __post_init__(self):
        if not is_rotation(self.extrinsic.R):
            raise ValueError(f"sensor {self.id!r}: extrinsic rotation is not orthonormal")

    def camera_pose(self, body_pose: Pose6D) -> Pose6D:
        return camera_pose(body_pose, self.extrinsic)


@dataclass(frozen=True)
class SensorRig:
    sensors: tuple[Sensor, ...]

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple(self.sensors))
        ids = [s.id for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate sensor ids in {ids}")

    def __len__(self):
        return len(self.sensors)

    def __iter__(self):
        return iter(self.sensors)


@dataclass
class FrameRGBD:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32 meters, 0.0 = invalid
    pose_used: Pose6D | None = None
    timestamp_ns: int = 0
    seq: int = 0

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    def copy(self) -> "FrameRGBD":
        return FrameRGBD(self.rgb.copy(), self.depth.copy(), self.pose_used, self.timestamp_ns, self.seq)
