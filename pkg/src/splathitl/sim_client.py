"""Desk-scale stand-in for the mocap system and the real vehicle.

A first-order velocity-lag point mass takes the place of the quadrotor. It
emits pose datagrams and obeys command datagrams exactly like the real link,
so the whole loop can run deterministically in one process
(``run_closed_loop``) or in real time over UDP (``SimDroneNode``).
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Pose6D, yaw_quat
from .renderer.camera import CameraIntrinsics
from .transport import (
    Command,
    CommandKind,
    DatagramIngest,
    DatagramSender,
    LatestCell,
    PoseSample,
    decode_command,
    encode_command,
    encode_pose,
)


class Mode(str, enum.Enum):
    GROUNDED = "grounded"
    FLYING = "flying"
    LANDING = "landing"


@dataclass(frozen=True)
class SimParams:
    tau: float = 0.3
    v_max: float = 6.0
    land_speed: float = 0.5
    takeoff_speed: float = 0.5
    takeoff_height: float = 1.0
    position_gain: float = 1.0


@dataclass(frozen=True)
class SimDroneState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    commanded_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mode: Mode = Mode.GROUNDED
    climbing: bool = False
    yaw_rate: float = 0.0
    faults: int = 0

    def pose(self) -> Pose6D:
        return Pose6D(self.position, yaw_quat(self.yaw))

    @classmethod
    def hovering(cls, position, yaw: float = 0.0) -> "SimDroneState":
        return cls(np.asarray(position, dtype=float), np.zeros(3), yaw, np.zeros(3), Mode.FLYING)


def _clamp_norm(v: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v * (limit / n) if n > limit else v


def sim_step(state: SimDroneState, cmd: Command | None, dt: float,
             params: SimParams = SimParams()) -> SimDroneState:
    """Advance the point-mass model by ``dt`` seconds.

    The velocity lag v' = (v_cmd - v) / tau is integrated with its exact
    exponential solution for constant v_cmd over the step, then the position
    with the updated velocity (semi-implicit Euler).
    """
    if not (0.0 < dt <= 0.05):
        raise ValueError(f"dt must be in (0, 0.05], got {dt}")
    if cmd is not None and not cmd.finite:
        return dataclasses.replace(state, faults=state.faults + 1)

    mode, climbing = state.mode, state.climbing
    v_cmd = np.asarray(state.commanded_velocity, dtype=float)
    yaw_rate = state.yaw_rate
    p = np.asarray(state.position, dtype=float)
    if cmd is not None:
        if cmd.kind is CommandKind.LAND and mode is not Mode.GROUNDED:
            mode, climbing = Mode.LANDING, False
        elif cmd.kind is CommandKind.TAKEOFF and mode is Mode.GROUNDED:
            mode, climbing = Mode.FLYING, True
        elif mode is Mode.FLYING and not climbing:
            if cmd.kind is CommandKind.VELOCITY:
                v_cmd = np.asarray(cmd.payload[:3], dtype=float)
                yaw_rate = cmd.payload[3]
            elif cmd.kind is CommandKind.POSITION:
                target = np.asarray(cmd.payload[:3], dtype=float)
                v_cmd = params.position_gain * (target - p)
                yaw_rate = 0.0

    if mode is Mode.GROUNDED:
        return dataclasses.replace(state, velocity=np.zeros(3), commanded_velocity=np.zeros(3),
                                   position=np.array([p[0], p[1], 0.0]), yaw_rate=0.0)
    if mode is Mode.LANDING:
        v_cmd = np.array([0.0, 0.0, -params.land_speed])
        yaw_rate = 0.0
    elif climbing:
        if p[2] >= params.takeoff_height:
            climbing = False
            v_cmd = np.zeros(3)
        else:
            v_cmd = np.array([0.0, 0.0, params.takeoff_speed])
    v_cmd = _clamp_norm(v_cmd, params.v_max)

    decay = math.exp(-dt / params.tau)
    v = v_cmd + (np.asarray(state.velocity, dtype=float) - v_cmd) * decay
    v = _clamp_norm(v, params.v_max)
    p = p + v * dt
    yaw = math.remainder(state.yaw + yaw_rate * dt, 2.0 * math.pi)
    if mode is Mode.LANDING and p[2] <= 0.0:
        return SimDroneState(np.array([p[0], p[1], 0.0]), np.zeros(3), yaw, np.zeros(3), Mode.GROUNDED,
                             False, 0.0, state.faults)
    if p[2] < 0.0:
        # the floor stops descent while flying
        p[2] = 0.0
        v[2] = max(v[2], 0.0)
    return SimDroneState(p, v, yaw, v_cmd, mode, climbing, yaw_rate, state.faults)


# --- reference trajectories -------------------------------------------------

class TrajectoryKind(str, enum.Enum):
    SQUARE = "square"
    SPIRAL = "spiral"
    LEMNISCATE = "lemniscate"


@dataclass(frozen=True)
class TrajectorySpec:
    kind: TrajectoryKind
    amplitude: float = 1.0  # side length (square) or lobe amplitude (lemniscate)
    omega: float = 0.5
    height: float = 1.0
    speed: float = 0.5  # square only
    r0: float = 0.2  # spiral only
    radial_rate: float = 0.05
    climb_rate: float = 0.05
    duration: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "kind", TrajectoryKind(self.kind))
        for name in ("amplitude", "omega", "speed", "duration"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.height < 0 or self.r0 < 0:
            raise ValueError("height and r0 must be non-negative")

    @property
    def period(self) -> float:
        if self.kind is TrajectoryKind.SQUARE:
            return 4.0 * self.amplitude / self.speed
        return 2.0 * math.pi / self.omega


def trajectory_point(spec: TrajectorySpec, t: float) -> np.ndarray:
    if not (0.0 <= t <= spec.duration):
        raise ValueError(f"t={t} outside [0, {spec.duration}]")
    h = spec.height
    if spec.kind is TrajectoryKind.SQUARE:
        A = spec.amplitude
        s = math.fmod(spec.speed * t, 4.0 * A)
        side, f = divmod(s, A)
        corners = ((0.0, 0.0), (A, 0.0), (A, A), (0.0, A), (0.0, 0.0))
        (x0, y0), (x1, y1) = corners[int(side)], corners[int(side) + 1]
        r = f / A
        return np.array([x0 + r * (x1 - x0), y0 + r * (y1 - y0), h])
    if spec.kind is TrajectoryKind.SPIRAL:
        r = spec.r0 + spec.radial_rate * t
        a = spec.omega * t
        return np.array([r * math.cos(a), r * math.sin(a), h + spec.climb_rate * t])
    a = spec.omega * t
    return np.array([spec.amplitude * math.sin(a), spec.amplitude * math.sin(a) * math.cos(a), h])


def sample_trajectory(spec: TrajectorySpec, rate_hz: float, origin=(0.0, 0.0, 0.0)) -> list[PoseSample]:
    """Poses at ``rate_hz`` with yaw along the direction of travel."""
    n = int(math.floor(spec.duration * rate_hz)) + 1
    ts = np.arange(n) / rate_hz
    pts = np.array([trajectory_point(spec, t) for t in ts]) + np.asarray(origin, dtype=float)
    out = []
    yaw = 0.0
    for i, (t, p) in enumerate(zip(ts, pts)):
        j = min(i + 1, n - 1)
        d = pts[j] - pts[max(j - 1, 0)]
        if np.hypot(d[0], d[1]) > 1e-9:
            yaw = math.atan2(d[1], d[0])
        q = yaw_quat(yaw)
        out.append(PoseSample(i, int(round(t * 1e9)), tuple(float(v) for v in p), tuple(float(v) for v in q)))
    return out


TRAJECTORY_HEADER = ("t_ns", "x", "y", "z", "qw", "qx", "qy", "qz")


def write_trajectory_csv(samples, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRAJECTORY_HEADER)
        for s in samples:
            w.writerow([s.timestamp_ns, *(repr(float(v)) for v in s.position), *(repr(float(v)) for v in s.quat)])


# --- potential field --------------------------------------------------------

@dataclass(frozen=True)
class PotentialFieldGains:
    k_attract: float = 1.0
    k_repulse: float = 2.0
    d_max: float = 3.0
    v_max: float = 6.0


def pixel_rays(K: CameraIntrinsics) -> np.ndarray:
    """Unit viewing rays (camera frame) for every pixel, shape (H, W, 3)."""
    v, u = np.mgrid[0:K.height, 0:K.width].astype(float)
    d = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def repulsive_vector(depth: np.ndarray, K: CameraIntrinsics, d_max: float = 3.0) -> np.ndarray:
    d = np.asarray(depth, dtype=float)
    if d.shape != (K.height, K.width):
        raise ValueError(f"depth shape {d.shape} does not match {K.width}x{K.height}")
    valid = np.isfinite(d) & (d > 0.0) & (d < d_max)
    n = int(valid.sum())
    if n == 0:
        return np.zeros(3)
    w = 1.0 / d[valid] - 1.0 / d_max
    rays = pixel_rays(K)[valid]
    return -(w[:, None] * rays).sum(axis=0) / n


def potential_field_step(depth: np.ndarray, K: CameraIntrinsics, goal_dir,
                         gains: PotentialFieldGains = PotentialFieldGains()) -> Command:
    """Camera-frame velocity: attraction to ``goal_dir`` plus depth-based repulsion."""
    g = np.asarray(goal_dir, dtype=float)
    n = np.linalg.norm(g)
    if not (np.isfinite(n) and abs(n - 1.0) < 1e-6):
        raise ValueError("goal_dir must be a unit vector")
    v = gains.k_attract * g + gains.k_repulse * repulsive_vector(depth, K, gains.d_max)
    return Command.velocity(_clamp_norm(v, gains.v_max))


def potential_field_world(depth: np.ndarray, K: CameraIntrinsics, cam_pose: Pose6D, goal_world,
                          gains: PotentialFieldGains = PotentialFieldGains()) -> Command:
    """Same as ``potential_field_step`` with the goal and result in world axes."""
    R = cam_pose.R
    g = np.asarray(goal_world, dtype=float)
    g = g / np.linalg.norm(g)
    c = potential_field_step(depth, K, R.T @ g, gains)
    return Command.velocity(R @ np.asarray(c.payload[:3]))


# --- waypoint controller ----------------------------------------------------

class WaypointController:
    """Velocity commands that chase a list of waypoints at a cruise speed."""

    def __init__(self, waypoints, speed: float = 1.0, tolerance: float = 0.15, gain: float = 2.0):
        self.waypoints = [np.asarray(w, dtype=float) for w in waypoints]
        self.speed = speed
        self.tolerance = tolerance
        self.gain = gain
        self.index = 0

    @property
    def finished(self) -> bool:
        return self.index >= len(self.waypoints)

    def __call__(self, sample: PoseSample, frame=None) -> Command | None:
        p = np.asarray(sample.position, dtype=float)
        while not self.finished and np.linalg.norm(self.waypoints[self.index] - p) < self.tolerance:
            self.index += 1
        if self.finished:
            return Command.velocity(np.zeros(3), timestamp_ns=sample.timestamp_ns)
        d = self.waypoints[self.index] - p
        v = _clamp_norm(self.gain * d, self.speed)
        if self.index < len(self.waypoints) - 1:
            # keep cruise speed through intermediate waypoints
            v = d / np.linalg.norm(d) * self.speed
        return Command.velocity(v, timestamp_ns=sample.timestamp_ns)


class Mission:
    """Take off, then hand over to a waypoint controller once the climb ends."""

    def __init__(self, waypoints, speed: float = 1.0, takeoff_height: float = 1.0, tolerance: float = 0.15):
        self.follower = WaypointController(waypoints, speed, tolerance)
        self.takeoff_height = takeoff_height
        self.takeoff_sent = False
        self.climbed = False

    def __call__(self, sample: PoseSample, frame=None) -> Command | None:
        if not self.takeoff_sent:
            self.takeoff_sent = True
            return Command.takeoff(sample.timestamp_ns)
        if not self.climbed:
            if sample.position[2] < self.takeoff_height - 1e-6:
                return None
            self.climbed = True
        return self.follower(sample, frame)


# --- closed loop ------------------------------------------------------------

@dataclass
class LoopResult:
    states: list[SimDroneState]
    poses: list[PoseSample]
    commands: list[tuple[int, Command]]  # (t_ns, command) as applied by the sim
    supervisor: object | None = None
    land_command_ns: int | None = None


def run_closed_loop(initial: SimDroneState, controller: Callable, *, duration: float, dt: float = 0.005,
                    pose_rate: float = 200.0, control_rate: float = 50.0, supervisor=None,
                    supervisor_rate: float = 200.0, render: Callable | None = None,
                    params: SimParams = SimParams(), stop_on_ground: bool = True) -> LoopResult:
    """Deterministic in-process loop on a fixed tick schedule.

    Every message crosses the same byte codecs as the live system: poses go
    through ``encode_pose`` into a latest-wins cell, commands through
    ``encode_command``. The supervisor's land command overrides the
    controller for the rest of the run.
    """
    def every(rate: float) -> int:
        k = round(1.0 / (rate * dt))
        if k < 1 or abs(k * dt * rate - 1.0) > 1e-9:
            raise ValueError(f"rate {rate} Hz is not a whole multiple of the {dt} s tick")
        return k

    pose_every, ctrl_every, sup_every = every(pose_rate), every(control_rate), every(supervisor_rate)
    cell = LatestCell()
    state = initial
    states, poses, applied = [state], [], []
    pending: Command | None = None
    landing_forced = False
    land_ns = None
    seq = 0
    n_ticks = int(round(duration / dt))
    last_sup_seq = -1
    for k in range(1, n_ticks + 1):
        state = sim_step(state, pending, dt, params)
        if pending is not None:
            applied.append((int(round(k * dt * 1e9)), pending))
        pending = None
        t_ns = int(round(k * dt * 1e9))
        states.append(state)
        if k % pose_every == 0:
            seq += 1
            sample = PoseSample.from_pose(seq, t_ns, state.pose())
            cell.handle_pose_datagram(encode_pose(sample))
            poses.append(sample)
        latest = cell.get()
        if supervisor is not None and k % sup_every == 0 and latest is not None and latest.seq != last_sup_seq:
            last_sup_seq = latest.seq
            cmd = supervisor.step(latest)
            if cmd is not None and not landing_forced:
                landing_forced = True
                land_ns = t_ns
                pending = decode_command(encode_command(cmd))
        if not landing_forced and k % ctrl_every == 0 and latest is not None:
            frame = render(latest) if render is not None else None
            cmd = controller(latest, frame)
            if cmd is not None:
                pending = decode_command(encode_command(cmd))
        if stop_on_ground and landing_forced and state.mode is Mode.GROUNDED:
            break
    return LoopResult(states, poses, applied, supervisor, land_ns)


class SimDroneNode:
    """Real-time simulated vehicle speaking the UDP protocols.

    Sends pose datagrams to ``pose_addr`` and listens for commands on
    ``command_port``.
    """

    def __init__(self, pose_addr: tuple[str, int], command_port: int = 0, *, host: str = "127.0.0.1",
                 initial: SimDroneState | None = None, dt: float = 0.005, pose_rate: float = 200.0,
                 params: SimParams = SimParams()):
        self.sender = DatagramSender(*pose_addr)
        self.commands = LatestCell()
        self.ingest = DatagramIngest.bind(host, command_port, self.commands, kind="command")
        self.state = initial or SimDroneState()
        self.dt = dt
        self.pose_every = max(1, round(1.0 / (pose_rate * dt)))
        self.params = params
        self.seq = 0
        self.log: list[PoseSample] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def command_address(self):
        return self.ingest.address

    def run(self, duration: float, on_tick: Callable | None = None):
        self.ingest.start()
        t0 = time.monotonic()
        seen = 0
        k = 0
        try:
            while not self._stop.is_set() and k * self.dt < duration:
                k += 1
                version, cmd = self.commands.get_versioned()
                if version == seen:
                    cmd = None
                seen = version
                self.state = sim_step(self.state, cmd, self.dt, self.params)
                if k % self.pose_every == 0:
                    self.seq += 1
                    s = PoseSample.from_pose(self.seq, time.time_ns(), self.state.pose())
                    self.sender.send_pose(s)
                    self.log.append(s)
                if on_tick is not None:
                    on_tick(self)
                delay = t0 + k * self.dt - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
        finally:
            self.ingest.stop()
            self.sender.close()

    def start(self, duration: float, on_tick: Callable | None = None) -> "SimDroneNode":
        self._thread = threading.Thread(target=self.run, args=(duration, on_tick), daemon=True)
        self._thread.start()
        return self

    def join(self, timeout: float | None = None):
        if self._thread is not None:
            self._thread.join(timeout)

    def stop(self):
        self._stop.set()
        self.join(2.0)
