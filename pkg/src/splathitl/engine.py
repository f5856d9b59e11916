"""Live engine: pose ingest, render loop, frame server and grader threads."""
from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass

from . import run_supervisor as rs
from .config import ScenarioConfig
from .renderer import render_rig
from .transport import (
    DatagramIngest,
    DatagramSender,
    FrameServer,
    LatestCell,
    RateStats,
    UndefinedRateError,
    measure_rate,
)
from .world_model import overlay_hand

log = logging.getLogger(__name__)


class _Ticker:
    """Fixed-rate schedule that skips missed ticks instead of bursting."""

    def __init__(self, hz: float):
        self.period = 1.0 / hz
        self.next = time.monotonic()

    def wait(self, stop: threading.Event) -> bool:
        self.next += self.period
        now = time.monotonic()
        if self.next < now:
            self.next = now
        return not stop.wait(max(0.0, self.next - now))


@dataclass
class EngineStatus:
    render_hz: float | None
    render_p50_ms: float | None
    render_p99_ms: float | None
    frames_rendered: int
    poses_accepted: int
    poses_stale: int
    poses_malformed: int
    clients: int
    run: rs.RunState


class HitlEngine:
    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.scene = config.load_scene()
        self.grid = config.build_grid(self.scene)
        self.course = config.build_course(self.grid)
        self.rig = config.build_rig()
        self.settings = config.render_settings()
        self.window = config.build_window()
        self.pose_cell = LatestCell()
        self.supervisor = rs.Supervisor(self.course)
        self._sup_lock = threading.Lock()
        self._stop = threading.Event()
        self._render_times: deque[float] = deque(maxlen=4096)
        self.frames_rendered = 0
        self._recorded = False
        self.ingest: DatagramIngest | None = None
        self.frames: FrameServer | None = None
        self.commands: DatagramSender | None = None
        self._threads: list[threading.Thread] = []

    # --- lifecycle ------------------------------------------------------

    def start(self) -> "HitlEngine":
        p = self.config.ports
        self.ingest = DatagramIngest.bind(p.host, p.pose, self.pose_cell).start()
        self.frames = FrameServer(p.host, p.frames).start()
        self.commands = DatagramSender(p.command_target, p.commands)
        for target, name in ((self._render_loop, "render"), (self._supervise_loop, "supervisor")):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        log.info("engine up: pose udp %s, frames tcp %s", self.ingest.address, self.frames.address)
        return self

    def stop(self):
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2.0)
        if self.ingest:
            self.ingest.stop()
        if self.frames:
            self.frames.stop()
        if self.commands:
            self.commands.close()

    # --- loops ----------------------------------------------------------

    def render_once(self, sample):
        body = sample.pose()
        frames = render_rig(self.scene, body, self.rig, self.settings,
                            timestamp_ns=sample.timestamp_ns, seq=sample.seq)
        if self.window is not None:
            t = sample.timestamp_ns * 1e-9
            frames = [overlay_hand(f, s.camera_pose(body), s.intrinsics, self.window, t)
                      for f, s in zip(frames, self.rig)]
        return frames

    def _render_loop(self):
        tick = _Ticker(self.config.rates.render_hz)
        last_seq = -1
        while tick.wait(self._stop):
            sample = self.pose_cell.get()
            if sample is None or sample.seq == last_seq:
                continue
            last_seq = sample.seq
            try:
                frames = self.render_once(sample)
            except Exception:  # keep serving; a bad pose must not kill the loop
                log.exception("render failed for seq %d", sample.seq)
                continue
            self._render_times.append(time.monotonic())
            self.frames_rendered += 1
            for s, f in zip(self.rig, frames):
                self.frames.publish(s.id, f)

    def _supervise_loop(self):
        tick = _Ticker(self.config.rates.supervisor_hz)
        while tick.wait(self._stop):
            sample = self.pose_cell.get()
            if sample is None:
                continue
            with self._sup_lock:
                cmd = self.supervisor.step(sample)
                state = self.supervisor.state
            if cmd is not None:
                self.commands.send_command(cmd)
                log.warning("land command sent: %s", state.events[-1].kind)
            if state.status.terminal and not self._recorded:
                self._recorded = True
                self.record_run()

    def record_run(self):
        state = self.supervisor.state
        rs.append_leaderboard(rs.LeaderboardRecord.from_state(self.config.team, state),
                              self.config.leaderboard_path, len(self.course.gates))
        if self.config.events_path:
            rs.write_events(state, self.config.events_path)

    def reset_run(self) -> rs.RunState:
        with self._sup_lock:
            self.supervisor = rs.Supervisor(self.course)
            self._recorded = False
            return self.supervisor.state

    # --- reporting ------------------------------------------------------

    def rate(self, window_s: float = 1.0) -> RateStats | None:
        try:
            return measure_rate(list(self._render_times), window_s)
        except UndefinedRateError:
            return None

    def status(self) -> EngineStatus:
        r = self.rate()
        with self._sup_lock:
            run = self.supervisor.state
        return EngineStatus(
            r.hz if r else None, r.p50_gap_ms if r else None, r.p99_gap_ms if r else None,
            self.frames_rendered, self.pose_cell.accepted, self.pose_cell.stale_drops,
            self.pose_cell.malformed, len(self.frames.connections) if self.frames else 0, run,
        )
