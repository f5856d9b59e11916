"""Scenario configuration: one JSON document per course.

Validation errors are re-raised as ``ConfigError`` whose message starts with
the dotted path of the offending field, e.g. ``gates.1.half_extents``.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .geometry import RigidTransform, down_extrinsic, front_extrinsic, plane_frame
from .renderer.camera import CameraIntrinsics, Sensor, SensorRig
from .renderer.render import RenderSettings
from .run_supervisor import Course, Gate
from .splat_scene import SplatScene, export_pointcloud, load_scene, room_scene
from .world_model import DynamicWindow, Geofence, OccupancyGrid, build_grid

ENV_PORTS = {
    "pose": "SPLATHITL_POSE_PORT",
    "frames": "SPLATHITL_FRAME_PORT",
    "commands": "SPLATHITL_COMMAND_PORT",
    "http": "SPLATHITL_HTTP_PORT",
}


class ConfigError(ValueError):
    pass


Vec3 = tuple[float, float, float]


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeofenceConfig(_Model):
    min: Vec3 = (0.0, 0.0, 0.0)
    max: Vec3 = (11.0, 4.5, 3.65)

    @model_validator(mode="after")
    def _ordered(self):
        if not all(lo < hi for lo, hi in zip(self.min, self.max)):
            raise ValueError("min must be below max on every axis")
        return self


class WindowConfig(_Model):
    position: Vec3
    normal: Vec3 = (1.0, 0.0, 0.0)
    half_extents: tuple[float, float] = (0.6, 0.6)
    hand_length: float = Field(0.5, gt=0)
    hand_width: float = Field(0.1, gt=0)
    omega: float = 1.0
    theta0: float = 0.0
    border_width: float = Field(0.1, ge=0)

    @field_validator("half_extents")
    @classmethod
    def _pos(cls, v):
        if min(v) <= 0:
            raise ValueError("half extents must be positive")
        return v

    @model_validator(mode="after")
    def _hand_fits(self):
        if self.hand_length > min(self.half_extents):
            raise ValueError("hand_length must not exceed the smaller half extent")
        return self

    def build(self) -> DynamicWindow:
        return DynamicWindow(plane_frame(self.position, self.normal), self.half_extents, self.hand_length,
                             self.hand_width, self.omega, self.theta0, self.border_width)


class GateConfig(_Model):
    kind: Literal["static", "dynamic"] = "static"
    position: Vec3 | None = None
    normal: Vec3 = (1.0, 0.0, 0.0)
    half_extents: tuple[float, float] = (0.5, 0.5)
    name: str = ""

    @field_validator("half_extents")
    @classmethod
    def _pos(cls, v):
        if min(v) <= 0:
            raise ValueError("half extents must be positive")
        return v

    @model_validator(mode="after")
    def _static_needs_position(self):
        if self.kind == "static" and self.position is None:
            raise ValueError("static gates need a position")
        return self


class SensorConfigModel(_Model):
    id: str
    width: int = Field(320, ge=8, le=8192)
    height: int = Field(240, ge=8, le=8192)
    hfov_deg: float | None = Field(90.0, gt=0, lt=180)
    fx: float | None = Field(None, gt=0)
    fy: float | None = Field(None, gt=0)
    cx: float | None = None
    cy: float | None = None
    near: float = Field(0.05, gt=0)
    far: float = Field(100.0, gt=0)
    mount: Literal["front", "down"] | list[float] = "front"
    offset: Vec3 = (0.0, 0.0, 0.0)

    @model_validator(mode="after")
    def _check(self):
        if self.near >= self.far:
            raise ValueError("near must be below far")
        if isinstance(self.mount, list) and len(self.mount) != 16:
            raise ValueError("mount matrix must have 16 entries (row-major 4x4)")
        return self

    def intrinsics(self) -> CameraIntrinsics:
        if self.fx is not None:
            fy = self.fy or self.fx
            cx = (self.width - 1) / 2 if self.cx is None else self.cx
            cy = (self.height - 1) / 2 if self.cy is None else self.cy
            return CameraIntrinsics(self.fx, fy, cx, cy, self.width, self.height, self.near, self.far)
        K = CameraIntrinsics.from_fov(self.width, self.height, self.hfov_deg)
        return CameraIntrinsics(K.fx, K.fy, K.cx, K.cy, K.width, K.height, self.near, self.far)

    def extrinsic(self) -> RigidTransform:
        if self.mount == "front":
            return front_extrinsic(self.offset)
        if self.mount == "down":
            return down_extrinsic(self.offset)
        return RigidTransform.from_matrix(np.asarray(self.mount).reshape(4, 4))


class SyntheticScene(_Model):
    kind: Literal["room"] = "room"
    n: int = Field(50_000, ge=1)
    seed: int = 0


class PortsConfig(_Model):
    pose: int = Field(5155, ge=0, le=65535)
    frames: int = Field(5156, ge=0, le=65535)
    commands: int = Field(5157, ge=0, le=65535)
    http: int = Field(8155, ge=0, le=65535)
    host: str = "127.0.0.1"
    command_target: str = "127.0.0.1"


class RatesConfig(_Model):
    render_hz: float = Field(100.0, gt=0)
    supervisor_hz: float = Field(100.0, gt=0)


class ScenarioConfig(_Model):
    scene_path: str | None = None
    synthetic: SyntheticScene | None = None
    voxel_size: float = Field(0.1, gt=0)
    collision_radius: float = Field(0.2, gt=0)
    opacity_min: float = Field(0.5, ge=0, lt=1)
    grid_padding: float = Field(0.0, ge=0)
    z_takeoff: float = Field(0.15, ge=0)
    geofence: GeofenceConfig = GeofenceConfig()
    gates: list[GateConfig] = []
    window: WindowConfig | None = None
    sensors: list[SensorConfigModel] = [SensorConfigModel(id="front")]
    ports: PortsConfig = PortsConfig()
    rates: RatesConfig = RatesConfig()
    background: Vec3 = (0.0, 0.0, 0.0)
    team: str = "anonymous"
    leaderboard_path: str = "leaderboard.csv"
    events_path: str | None = None

    @field_validator("background")
    @classmethod
    def _unit_color(cls, v):
        if not all(0.0 <= c <= 1.0 for c in v):
            raise ValueError("background components must be in [0, 1]")
        return v

    @model_validator(mode="after")
    def _consistency(self):
        if (self.scene_path is None) == (self.synthetic is None):
            raise ValueError("exactly one of scene_path or synthetic must be set")
        if any(g.kind == "dynamic" for g in self.gates) and self.window is None:
            raise ValueError("a dynamic gate needs the window section")
        ids = [s.id for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise ValueError("sensor ids must be unique")
        if not self.sensors:
            raise ValueError("at least one sensor is required")
        return self

    # --- builders -------------------------------------------------------

    def load_scene(self) -> SplatScene:
        if self.synthetic is not None:
            return room_scene(self.synthetic.n, np.random.default_rng(self.synthetic.seed),
                              size=tuple(np.subtract(self.geofence.max, self.geofence.min)))
        return load_scene(self.scene_path)

    def build_grid(self, scene: SplatScene) -> OccupancyGrid | None:
        pts = export_pointcloud(scene, self.opacity_min)
        if len(pts) == 0:
            return None
        return build_grid(pts, self.voxel_size, self.grid_padding)

    def build_window(self) -> DynamicWindow | None:
        return self.window.build() if self.window is not None else None

    def build_course(self, grid: OccupancyGrid | None) -> Course:
        window = self.build_window()
        gates = []
        for g in self.gates:
            if g.kind == "dynamic":
                gates.append(Gate.dynamic(window, g.name))
            else:
                gates.append(Gate(plane_frame(g.position, g.normal), g.half_extents, None, g.name))
        return Course(Geofence(self.geofence.min, self.geofence.max), gates, grid, self.collision_radius,
                      self.z_takeoff, self.voxel_size)

    def build_rig(self) -> SensorRig:
        return SensorRig([Sensor(s.id, s.intrinsics(), s.extrinsic()) for s in self.sensors])

    def render_settings(self) -> RenderSettings:
        return RenderSettings(background=tuple(self.background))


def _format_validation(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data: dict, base_dir: Path | None = None, env: dict | None = None) -> ScenarioConfig:
    env = os.environ if env is None else env
    data = dict(data)
    ports = dict(data.get("ports") or {})
    for key, var in ENV_PORTS.items():
        if var in env:
            try:
                ports[key] = int(env[var])
            except ValueError:
                raise ConfigError(f"ports.{key}: environment variable {var}={env[var]!r} is not an integer") from None
    if ports:
        data["ports"] = ports
    try:
        cfg = ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation(e)) from None
    if cfg.scene_path is not None:
        p = Path(cfg.scene_path)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if not p.is_file():
            raise ConfigError(f"scene_path: file not found: {p}")
        cfg = cfg.model_copy(update={"scene_path": str(p)})
    return cfg


def load_config(path, env: dict | None = None) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data, path.parent, env)
