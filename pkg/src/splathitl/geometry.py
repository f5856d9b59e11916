"""Rigid-body helpers shared by the renderer, world model and supervisor.

Quaternions are (w, x, y, z), Hamilton convention. A ``Pose6D`` is the pose
of a frame expressed in the world: ``p_world = R @ p_local + position``.
Camera frames follow the OpenCV convention (x right, y down, z forward);
the robot body frame is x forward, y left, z up.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PoseError(ValueError):
    """Raised for non-finite or zero-norm poses."""


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = (float(v) for v in q)
    n = w * w + x * x + y * y + z * z
    if not np.isfinite(n) or n < 1e-12:
        raise PoseError(f"invalid quaternion {tuple(q)}")
    s = 2.0 / n
    return np.array(
        [
            [1 - s * (y * y + z * z), s * (x * y - z * w), s * (x * z + y * w)],
            [s * (x * y + z * w), 1 - s * (x * x + z * z), s * (y * z - x * w)],
            [s * (x * z - y * w), s * (y * z + x * w), 1 - s * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to a unit quaternion with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise PoseError(f"invalid quaternion {tuple(q)}")
    return q / n


def yaw_quat(yaw: float) -> np.ndarray:
    return np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])


def is_rotation(R, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=float)
    return (
        R.shape == (3, 3)
        and np.allclose(R @ R.T, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) < tol
    )


@dataclass(frozen=True)
class RigidTransform:
    """``p_to = R @ p_from + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float).reshape(4, 4)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)


@dataclass(frozen=True)
class Pose6D:
    """Pose of a frame in the world (position in meters, unit quaternion)."""

    position: np.ndarray
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise PoseError(f"non-finite position {tuple(p)}")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "quat", normalize_quat(np.asarray(self.quat, dtype=float).reshape(4)))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def to_world(self) -> RigidTransform:
        """Local frame -> world."""
        return RigidTransform(self.R, self.position)

    def world_to_local(self) -> RigidTransform:
        return self.to_world().inverse()

    @classmethod
    def from_transform(cls, T: RigidTransform) -> "Pose6D":
        return cls(T.t, matrix_to_quat(T.R))


# body (x fwd, y left, z up) -> optical (x right, y down, z fwd)
R_CAM_FROM_BODY_FRONT = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
# optical z along body -z
R_CAM_FROM_BODY_DOWN = np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])


def front_extrinsic(offset=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Body->camera transform for a forward-looking camera at ``offset`` (body frame)."""
    R = R_CAM_FROM_BODY_FRONT
    return RigidTransform(R, -R @ np.asarray(offset, dtype=float))


def down_extrinsic(offset=(0.0, 0.0, 0.0)) -> RigidTransform:
    R = R_CAM_FROM_BODY_DOWN
    return RigidTransform(R, -R @ np.asarray(offset, dtype=float))


def camera_pose(body_pose: Pose6D, body_to_cam: RigidTransform) -> Pose6D:
    """World pose of a camera mounted on the body with the given extrinsic."""
    cam_to_world = body_pose.to_world() @ body_to_cam.inverse()
    return Pose6D.from_transform(cam_to_world)


def plane_frame(position, normal, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Plane-local -> world transform; local z is ``normal``, local y points up.

    Local x is horizontal (``up x normal``), so angle 0 in the plane is
    horizontal and pi/2 points up.
    """
    z = np.asarray(normal, dtype=float)
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=float), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross([0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), np.asarray(position, dtype=float))
