from .camera import CameraIntrinsics, FrameRGBD, Sensor, SensorRig
from .render import (
    DEFAULT_SETTINGS,
    ProjectedGaussian,
    RenderResult,
    RenderSettings,
    project_gaussian,
    render,
    render_image,
    render_rig,
    to_rgb8,
)
from .sh import eval_sh_color

__all__ = [
    "CameraIntrinsics", "FrameRGBD", "Sensor", "SensorRig", "DEFAULT_SETTINGS", "ProjectedGaussian",
    "RenderResult", "RenderSettings", "project_gaussian", "render", "render_image", "render_rig",
    "to_rgb8", "eval_sh_color",
]
