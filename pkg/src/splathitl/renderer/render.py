from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Pose6D, RigidTransform, is_rotation
from ..splat_scene import Gaussian3D, SplatScene, covariance_of
from . import _kernels
from .camera import CameraIntrinsics, FrameRGBD, SensorRig


@dataclass(frozen=True)
class RenderSettings:
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    depth_alpha_min: float = 0.5
    dilation: float = 0.3
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


DEFAULT_SETTINGS = RenderSettings()


@dataclass(frozen=True)
class ProjectedGaussian:
    center2d: np.ndarray
    cov2d: np.ndarray
    z_cam: float


@dataclass
class RenderResult:
    color: np.ndarray  # (H, W, 3) float64 in [0, 1] (before quantization)
    depth: np.ndarray  # (H, W) float64, 0.0 = invalid
    alpha: np.ndarray  # (H, W) accumulated opacity
    n_visible: int = 0


def project_gaussian(g: Gaussian3D, world_to_cam: RigidTransform, K: CameraIntrinsics,
                     dilation: float = 0.3, alpha_min: float = 1.0 / 255.0) -> ProjectedGaussian | None:
    """Perspective (EWA) projection of one Gaussian, or ``None`` if culled.

    Culled when the center is outside [near, far] or when the ellipse inside
    which its alpha reaches ``alpha_min`` misses every pixel center. For
    opacities above ~0.35 that ellipse is wider than 3 sigma, so a fixed
    3-sigma cut would drop visible contributions.
    """
    R = world_to_cam.R
    x, y, z = R @ g.mean + world_to_cam.t
    if z < K.near or z > K.far:
        return None
    # x/z and y/z are clamped to 1.3x the half field of view inside the Jacobian
    txz = np.clip(x / z, -0.65 * K.width / K.fx, 0.65 * K.width / K.fx)
    tyz = np.clip(y / z, -0.65 * K.height / K.fy, 0.65 * K.height / K.fy)
    J = np.array([[K.fx / z, 0.0, -K.fx * txz / z], [0.0, K.fy / z, -K.fy * tyz / z]])
    T = J @ R
    cov = T @ covariance_of(g) @ T.T + dilation * np.eye(2)
    cov = 0.5 * (cov + cov.T)
    center = np.array([K.cx + K.fx * x / z, K.cy + K.fy * y / z])
    if g.opacity < alpha_min:
        return None
    rx, ry = np.sqrt(2.0 * np.log(g.opacity / alpha_min) * np.diag(cov))
    if (np.ceil(center[0] - rx) > min(np.floor(center[0] + rx), K.width - 1) or center[0] + rx < 0
            or np.ceil(center[1] - ry) > min(np.floor(center[1] + ry), K.height - 1) or center[1] + ry < 0):
        return None
    return ProjectedGaussian(center, cov, float(z))


def render_image(scene: SplatScene, cam_pose: Pose6D, K: CameraIntrinsics,
                 settings: RenderSettings = DEFAULT_SETTINGS) -> RenderResult:
    """Float color, depth and alpha images for a camera at ``cam_pose``.

    ``cam_pose`` is the camera frame (OpenCV axes) in world coordinates.
    """
    world_to_cam = cam_pose.world_to_local()
    R, t = world_to_cam.R, world_to_cam.t
    if not is_rotation(R):
        raise ValueError("camera rotation is not orthonormal")
    bg = np.asarray(settings.background, dtype=np.float64)
    H, W = K.height, K.width
    if len(scene) == 0:
        color = np.broadcast_to(bg, (H, W, 3)).copy()
        return RenderResult(color, np.zeros((H, W)), np.zeros((H, W)), 0)

    geom, keep = _kernels.preprocess(
        scene.means, scene.covariances, scene.opacities, scene.sh, R, t, cam_pose.position,
        float(K.fx), float(K.fy), float(K.cx), float(K.cy), int(W), int(H),
        float(K.near), float(K.far), float(settings.dilation), float(settings.alpha_min),
    )
    visible = np.flatnonzero(keep)
    depth_key = geom[:, 5]
    order = _kernels.fix_ties(visible[np.argsort(depth_key[visible])], depth_key)
    colors = _kernels.colors_for(order, scene.means, scene.sh, cam_pose.position, scene.sh_coeffs_used)
    tiles_x = (W + _kernels.TILE - 1) // _kernels.TILE
    tiles_y = (H + _kernels.TILE - 1) // _kernels.TILE
    # gather into depth order so each tile walks its splats with good locality
    geom_sorted = geom[order]
    counts, entries = _kernels.bin_tiles(geom_sorted, tiles_x, tiles_y)
    color, depth, alpha = _kernels.composite(
        W, H, counts, entries, geom_sorted, scene.opacities[order], colors,
        float(settings.alpha_max), float(settings.alpha_min), float(settings.t_min),
        float(settings.depth_alpha_min), bg, float(K.near), float(K.far),
    )
    return RenderResult(color, depth, alpha, len(order))


def to_rgb8(color: np.ndarray) -> np.ndarray:
    return _kernels.quantize_rgb8(np.ascontiguousarray(color, dtype=np.float64))


def render(scene: SplatScene, cam_pose: Pose6D, K: CameraIntrinsics,
           settings: RenderSettings = DEFAULT_SETTINGS, *, timestamp_ns: int = 0, seq: int = 0,
           pose_used: Pose6D | None = None) -> FrameRGBD:
    if len(scene) == 0:
        # nothing to composite: skip the float images and quantize the background once
        if not is_rotation(cam_pose.world_to_local().R):
            raise ValueError("camera rotation is not orthonormal")
        bg8 = to_rgb8(np.asarray(settings.background, dtype=np.float64).reshape(1, 1, 3))
        rgb = np.broadcast_to(bg8, (K.height, K.width, 3)).copy()
        depth = np.zeros((K.height, K.width), dtype=np.float32)
    else:
        res = render_image(scene, cam_pose, K, settings)
        rgb, depth = to_rgb8(res.color), res.depth.astype(np.float32)
    return FrameRGBD(
        rgb=rgb,
        depth=depth,
        pose_used=pose_used if pose_used is not None else cam_pose,
        timestamp_ns=timestamp_ns,
        seq=seq,
    )


def render_rig(scene: SplatScene, body_pose: Pose6D, rig: SensorRig,
               settings: RenderSettings = DEFAULT_SETTINGS, *, timestamp_ns: int = 0,
               seq: int = 0) -> list[FrameRGBD]:
    """One frame per sensor; all frames share ``seq`` and ``timestamp_ns``."""
    if len(rig) == 0:
        raise ValueError("sensor rig is empty")
    return [
        render(scene, s.camera_pose(body_pose), s.intrinsics, settings,
               timestamp_ns=timestamp_ns, seq=seq, pose_used=body_pose)
        for s in rig
    ]
