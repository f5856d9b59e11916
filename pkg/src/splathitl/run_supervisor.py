"""Auto-grader: takeoff timer, safety checks and gate progression.

``supervise_step`` is a pure function of the previous ``RunState`` and two
consecutive pose samples, so a recorded pose log replays to the exact same
event log. ``Supervisor`` is a thin stateful wrapper used by the live engine.
"""
from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import enum
import fcntl
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform
from .transport import Command, PoseSample
from .world_model import (
    DynamicWindow,
    Geofence,
    OccupancyGrid,
    check_collision,
    check_geofence,
    in_hand,
    window_collision,
)


class Status(str, enum.Enum):
    ARMED = "armed"
    FLYING = "flying"
    COLLIDED = "collided"
    GEOFENCE_LAND = "geofence_land"
    FINISHED = "finished"

    @property
    def terminal(self) -> bool:
        return self in (Status.COLLIDED, Status.GEOFENCE_LAND, Status.FINISHED)


class Crossing(str, enum.Enum):
    CROSSED = "crossed"
    NOT_CROSSED = "not_crossed"
    HAND_HIT = "hand_hit"


@dataclass(frozen=True)
class Gate:
    """Planar rectangular aperture. ``pose`` maps gate-plane coordinates to world;
    the forward direction is the plane's +z."""

    pose: RigidTransform
    half_extents: tuple[float, float]
    window: DynamicWindow | None = None
    name: str = ""

    def __post_init__(self):
        hx, hy = (float(v) for v in self.half_extents)
        if hx <= 0 or hy <= 0:
            raise ValueError(f"gate half-extents must be positive, got {(hx, hy)}")
        object.__setattr__(self, "half_extents", (hx, hy))

    @classmethod
    def dynamic(cls, window: DynamicWindow, name: str = "") -> "Gate":
        return cls(window.pose, window.half_extents, window, name)

    @property
    def kind(self) -> str:
        return "static" if self.window is None else "dynamic"


def gate_crossing(prev, curr, g: Gate, t: float) -> Crossing:
    """Classify the segment prev -> curr against gate ``g`` at time ``t`` (seconds).

    A crossing goes from the back side (z < 0) to the front (z >= 0) and hits
    the plane inside the aperture. On a dynamic gate the hand blocks part of
    the aperture.
    """
    inv = g.pose.inverse()
    a = inv.apply(prev)
    b = inv.apply(curr)
    if not (a[2] < 0.0 <= b[2]):
        return Crossing.NOT_CROSSED
    s = -a[2] / (b[2] - a[2])
    hit = a[:2] + s * (b[:2] - a[:2])
    hx, hy = g.half_extents
    if abs(hit[0]) > hx or abs(hit[1]) > hy:
        return Crossing.NOT_CROSSED
    if g.window is not None and bool(in_hand(g.window, hit, t)):
        return Crossing.HAND_HIT
    return Crossing.CROSSED


@dataclass(frozen=True)
class Event:
    t_ns: int
    kind: str
    detail: str = ""

    def as_dict(self) -> dict:
        return {"t_ns": self.t_ns, "kind": self.kind, "detail": self.detail}


@dataclass(frozen=True)
class RunState:
    n_gates: int
    stage: int = 0
    status: Status = Status.ARMED
    t_start_ns: int | None = None
    t_end_ns: int | None = None
    events: tuple[Event, ...] = ()

    @property
    def elapsed_s(self) -> float:
        if self.t_start_ns is None:
            return 0.0
        if self.t_end_ns is None:
            return 0.0
        return (self.t_end_ns - self.t_start_ns) * 1e-9

    @property
    def stages_completed(self) -> int:
        return self.stage

    def with_event(self, t_ns: int, kind: str, detail: str = "", **changes) -> "RunState":
        return dataclasses.replace(self, events=self.events + (Event(t_ns, kind, detail),), **changes)


@dataclass(frozen=True)
class Course:
    """Everything the grader checks against."""

    fence: Geofence
    gates: tuple[Gate, ...]
    grid: OccupancyGrid | None = None
    collision_radius: float = 0.2
    z_takeoff: float = 0.15
    dynamic_voxel_size: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        if not self.collision_radius > 0:
            raise ValueError("collision_radius must be positive")

    @property
    def windows(self) -> list[DynamicWindow]:
        return [g.window for g in self.gates if g.window is not None]


def detect_takeoff(p: PoseSample, z_takeoff: float = 0.15) -> bool:
    return p.position[2] >= z_takeoff


def _fmt(p) -> str:
    return "(" + ", ".join(f"{v:.3f}" for v in p) + ")"


def supervise_step(state: RunState, prev: PoseSample | None, curr: PoseSample,
                   course: Course) -> tuple[RunState, Command | None]:
    """Advance the grader by one pose; returns the new state and an optional land command.

    Order inside a step: geofence, then collision (static grid and dynamic
    window), then the current gate.
    """
    if state.status.terminal:
        return state, None
    t_ns = curr.timestamp_ns
    pos = np.asarray(curr.position, dtype=float)
    if state.status is Status.ARMED:
        if not detect_takeoff(curr, course.z_takeoff):
            return state, None
        state = state.with_event(t_ns, "takeoff", _fmt(pos), status=Status.FLYING, t_start_ns=t_ns)

    if not check_geofence(course.fence, pos):
        state = state.with_event(t_ns, "geofence", _fmt(pos), status=Status.GEOFENCE_LAND, t_end_ns=t_ns)
        return state, Command.land(t_ns)

    t = t_ns * 1e-9
    hit = course.grid is not None and check_collision(course.grid, pos, course.collision_radius)
    detail = "static"
    if not hit:
        for w in course.windows:
            if window_collision(w, t, pos, course.collision_radius, course.dynamic_voxel_size):
                hit, detail = True, "dynamic"
                break
    if hit:
        state = state.with_event(t_ns, "collision", f"{detail} {_fmt(pos)}", status=Status.COLLIDED, t_end_ns=t_ns)
        return state, Command.land(t_ns)

    if prev is not None and state.stage < len(course.gates):
        gate = course.gates[state.stage]
        res = gate_crossing(prev.position, pos, gate, t)
        if res is Crossing.HAND_HIT:
            state = state.with_event(t_ns, "hand_hit", f"gate {state.stage}", status=Status.COLLIDED, t_end_ns=t_ns)
            return state, Command.land(t_ns)
        if res is Crossing.CROSSED:
            state = state.with_event(t_ns, "gate", f"gate {state.stage}", stage=state.stage + 1)
            if state.stage == len(course.gates):
                state = state.with_event(t_ns, "finished", f"{state.stage} gates", status=Status.FINISHED,
                                         t_end_ns=t_ns)
    return state, None


class Supervisor:
    """Stateful driver around ``supervise_step`` (one per run, single-threaded)."""

    def __init__(self, course: Course):
        self.course = course
        self.state = RunState(len(course.gates))
        self._prev: PoseSample | None = None
        self.commands: list[Command] = []

    def step(self, sample: PoseSample) -> Command | None:
        if self._prev is not None and sample.seq <= self._prev.seq:
            return None
        self.state, cmd = supervise_step(self.state, self._prev, sample, self.course)
        self._prev = sample
        if cmd is not None:
            self.commands.append(cmd)
        return cmd

    @property
    def done(self) -> bool:
        return self.state.status.terminal


def replay(course: Course, samples) -> tuple[RunState, list[Command]]:
    sup = Supervisor(course)
    for s in samples:
        sup.step(s)
    return sup.state, sup.commands


def write_events(state: RunState, path) -> None:
    with open(path, "w") as f:
        for e in state.events:
            f.write(json.dumps(e.as_dict()) + "\n")


def read_events(path) -> list[Event]:
    with open(path) as f:
        return [Event(**json.loads(line)) for line in f if line.strip()]


# --- leaderboard ------------------------------------------------------------

LEADERBOARD_HEADER = ("team", "stages", "elapsed_s", "status", "iso_timestamp")


@dataclass(frozen=True)
class LeaderboardRecord:
    team: str
    stages_completed: int
    elapsed_s: float
    status: str
    timestamp: dt.datetime = field(default_factory=lambda: dt.datetime.now(dt.timezone.utc))

    def row(self) -> list[str]:
        return [self.team, str(self.stages_completed), f"{self.elapsed_s:.3f}", str(self.status),
                self.timestamp.isoformat()]

    @classmethod
    def from_state(cls, team: str, state: RunState, timestamp: dt.datetime | None = None) -> "LeaderboardRecord":
        status = state.status.value
        kw = {} if timestamp is None else {"timestamp": timestamp}
        return cls(team, state.stages_completed, state.elapsed_s, status, **kw)


def append_leaderboard(record: LeaderboardRecord, path, n_gates: int | None = None) -> None:
    """Append one CSV row under an exclusive file lock (header on first write)."""
    if n_gates is not None and record.stages_completed > n_gates:
        raise ValueError(f"stages_completed {record.stages_completed} exceeds gate count {n_gates}")
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(record.row())
    line = buf.getvalue()
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        try:
            if os.fstat(fd).st_size == 0:
                os.write(fd, (",".join(LEADERBOARD_HEADER) + "\n").encode())
            os.write(fd, line.encode())
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
    finally:
        os.close(fd)


def read_leaderboard(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
