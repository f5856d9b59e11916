"""Wire formats and live plumbing for poses, commands and RGBD frames.

All integers are little-endian. Poses and commands travel as fixed-size UDP
datagrams; frames travel over TCP after a JSON sensor-config handshake.
Freshness beats completeness everywhere: the pose cell keeps only the newest
sample and the frame server keeps only the newest frame per connection.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import select
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose6D
from .renderer.camera import FrameRGBD

log = logging.getLogger(__name__)

POSE_MAGIC = 0x565A
POSE_VERSION = 1
COMMAND_MAGIC = 0x434D
FRAME_MAGIC = 0x4652
ERROR_MAGIC = 0x4545

_POSE = struct.Struct("<HBBIQ3d4d")
_COMMAND = struct.Struct("<HBQ4d")
_FRAME_HEADER = struct.Struct("<HIQHHBBII")
_ERROR_HEADER = struct.Struct("<HI")
_U32 = struct.Struct("<I")

POSE_SIZE = _POSE.size  # 72
COMMAND_SIZE = _COMMAND.size  # 43
FRAME_HEADER_SIZE = _FRAME_HEADER.size  # 28

DEFAULT_POSE_PORT = 5155
DEFAULT_FRAME_PORT = 5156
DEFAULT_COMMAND_PORT = 5157

MAX_CONFIG_BYTES = 64 * 1024


class ProtocolError(ValueError):
    """Bad magic, version or enum value."""


class LengthError(ProtocolError):
    """A buffer does not have the size its format requires."""


@dataclass(frozen=True)
class PoseSample:
    seq: int
    timestamp_ns: int
    position: tuple[float, float, float]
    quat: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def pose(self) -> Pose6D:
        return Pose6D(self.position, self.quat)

    @classmethod
    def from_pose(cls, seq: int, timestamp_ns: int, pose: Pose6D) -> "PoseSample":
        return cls(seq, timestamp_ns, tuple(float(v) for v in pose.position), tuple(float(v) for v in pose.quat))


def encode_pose(p: PoseSample) -> bytes:
    return _POSE.pack(POSE_MAGIC, POSE_VERSION, 0, p.seq, p.timestamp_ns, *p.position, *p.quat)


def decode_pose(data: bytes) -> PoseSample:
    if len(data) != POSE_SIZE:
        raise LengthError(f"pose datagram must be {POSE_SIZE} bytes, got {len(data)}")
    magic, version, _flags, seq, ts, *vals = _POSE.unpack(data)
    if magic != POSE_MAGIC:
        raise ProtocolError(f"bad pose magic 0x{magic:04x}")
    if version != POSE_VERSION:
        raise ProtocolError(f"unsupported pose version {version}")
    return PoseSample(seq, ts, tuple(vals[:3]), tuple(vals[3:]))


def normalize_sample(p: PoseSample, tol: float = 1e-3) -> PoseSample:
    """Validate and re-normalize an ingested pose; raises ProtocolError if unusable."""
    vals = p.position + p.quat
    if not all(math.isfinite(v) for v in vals):
        raise ProtocolError("non-finite pose values")
    n = math.sqrt(sum(q * q for q in p.quat))
    if abs(n - 1.0) > tol:
        raise ProtocolError(f"quaternion norm {n:.6f} is not within {tol} of 1")
    return PoseSample(p.seq, p.timestamp_ns, p.position, tuple(q / n for q in p.quat))


class CommandKind(enum.IntEnum):
    VELOCITY = 0
    POSITION = 1
    LAND = 2
    TAKEOFF = 3


@dataclass(frozen=True)
class Command:
    kind: CommandKind
    payload: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    timestamp_ns: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", CommandKind(self.kind))
        if self.kind in (CommandKind.LAND, CommandKind.TAKEOFF):
            object.__setattr__(self, "payload", (0.0, 0.0, 0.0, 0.0))
        else:
            object.__setattr__(self, "payload", tuple(float(v) for v in self.payload))

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.payload)

    @classmethod
    def velocity(cls, v, yaw_rate: float = 0.0, timestamp_ns: int = 0) -> "Command":
        return cls(CommandKind.VELOCITY, (float(v[0]), float(v[1]), float(v[2]), float(yaw_rate)), timestamp_ns)

    @classmethod
    def land(cls, timestamp_ns: int = 0) -> "Command":
        return cls(CommandKind.LAND, timestamp_ns=timestamp_ns)

    @classmethod
    def takeoff(cls, timestamp_ns: int = 0) -> "Command":
        return cls(CommandKind.TAKEOFF, timestamp_ns=timestamp_ns)


def encode_command(c: Command) -> bytes:
    return _COMMAND.pack(COMMAND_MAGIC, int(c.kind), c.timestamp_ns, *c.payload)


def decode_command(data: bytes) -> Command:
    if len(data) != COMMAND_SIZE:
        raise LengthError(f"command datagram must be {COMMAND_SIZE} bytes, got {len(data)}")
    magic, kind, ts, *payload = _COMMAND.unpack(data)
    if magic != COMMAND_MAGIC:
        raise ProtocolError(f"bad command magic 0x{magic:04x}")
    try:
        kind = CommandKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown command kind {kind}") from None
    return Command(kind, tuple(payload), ts)


# --- frames -----------------------------------------------------------------

@dataclass(frozen=True)
class SensorConfig:
    sensor_id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: tuple[float, ...]
    depth: bool = True

    def to_json(self) -> bytes:
        d = dict(self.__dict__)
        d["extrinsic"] = list(self.extrinsic)
        return json.dumps(d).encode()

    @classmethod
    def from_json(cls, raw: bytes) -> "SensorConfig":
        try:
            d = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ProtocolError(f"sensor config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ProtocolError("sensor config must be a JSON object")
        missing = [k for k in ("sensor_id", "width", "height", "fx", "fy", "cx", "cy", "extrinsic") if k not in d]
        if missing:
            raise ProtocolError(f"sensor config missing {', '.join(missing)}")
        ext = d["extrinsic"]
        if not (isinstance(ext, list) and len(ext) == 16):
            raise ProtocolError("sensor config extrinsic must be 16 numbers (row-major 4x4)")
        try:
            cfg = cls(str(d["sensor_id"]), int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                      float(d["cx"]), float(d["cy"]), tuple(float(v) for v in ext), bool(d.get("depth", True)))
        except (TypeError, ValueError) as e:
            raise ProtocolError(f"sensor config has a bad field: {e}") from None
        if not (0 < cfg.width < 65536 and 0 < cfg.height < 65536):
            raise ProtocolError("sensor config width/height out of range")
        return cfg


def encode_frame(frame: FrameRGBD, with_depth: bool = True) -> bytes:
    h, w = frame.rgb.shape[:2]
    rgb = np.ascontiguousarray(frame.rgb, dtype=np.uint8).tobytes()
    depth = np.ascontiguousarray(frame.depth, dtype="<f4").tobytes() if with_depth else b""
    header = _FRAME_HEADER.pack(FRAME_MAGIC, frame.seq & 0xFFFFFFFF, frame.timestamp_ns, w, h,
                                1 if with_depth else 0, 0, len(rgb), len(depth))
    return header + rgb + depth


@dataclass
class FrameHeader:
    seq: int
    timestamp_ns: int
    width: int
    height: int
    has_depth: bool
    rgb_len: int
    depth_len: int


def decode_frame_header(data: bytes) -> FrameHeader:
    if len(data) != FRAME_HEADER_SIZE:
        raise LengthError(f"frame header must be {FRAME_HEADER_SIZE} bytes, got {len(data)}")
    magic, seq, ts, w, h, flags, _res, rgb_len, depth_len = _FRAME_HEADER.unpack(data)
    if magic != FRAME_MAGIC:
        raise ProtocolError(f"bad frame magic 0x{magic:04x}")
    hdr = FrameHeader(seq, ts, w, h, bool(flags & 1), rgb_len, depth_len)
    if rgb_len != 3 * w * h or depth_len != (4 * w * h if hdr.has_depth else 0):
        raise LengthError(f"frame payload lengths {rgb_len}/{depth_len} do not match {w}x{h}")
    return hdr


def decode_frame(data: bytes, pose_used: Pose6D | None = None) -> FrameRGBD:
    hdr = decode_frame_header(data[:FRAME_HEADER_SIZE])
    body = data[FRAME_HEADER_SIZE:]
    if len(body) != hdr.rgb_len + hdr.depth_len:
        raise LengthError(f"frame body has {len(body)} bytes, header declares {hdr.rgb_len + hdr.depth_len}")
    return _frame_from_parts(hdr, body[:hdr.rgb_len], body[hdr.rgb_len:], pose_used)


def _frame_from_parts(hdr: FrameHeader, rgb: bytes, depth: bytes, pose_used) -> FrameRGBD:
    rgb_a = np.frombuffer(rgb, dtype=np.uint8).reshape(hdr.height, hdr.width, 3).copy()
    if hdr.has_depth:
        d = np.frombuffer(depth, dtype="<f4").reshape(hdr.height, hdr.width).astype(np.float32)
    else:
        d = np.zeros((hdr.height, hdr.width), dtype=np.float32)
    return FrameRGBD(rgb_a, d, pose_used or Pose6D(np.zeros(3)), hdr.timestamp_ns, hdr.seq)


def encode_error(message: str) -> bytes:
    msg = message.encode("utf-8")
    return _ERROR_HEADER.pack(ERROR_MAGIC, len(msg)) + msg


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


class RemoteError(ConnectionError):
    """The server answered with an error frame."""


def send_config(sock: socket.socket, cfg: SensorConfig) -> None:
    raw = cfg.to_json()
    sock.sendall(_U32.pack(len(raw)) + raw)


def read_frame(sock: socket.socket) -> FrameRGBD:
    """Read one frame (or raise RemoteError for an error frame) from a stream."""
    magic_bytes = _recv_exact(sock, 2)
    (magic,) = struct.unpack("<H", magic_bytes)
    if magic == ERROR_MAGIC:
        (length,) = _U32.unpack(_recv_exact(sock, 4))
        raise RemoteError(_recv_exact(sock, length).decode("utf-8", "replace"))
    hdr = decode_frame_header(magic_bytes + _recv_exact(sock, FRAME_HEADER_SIZE - 2))
    rgb = _recv_exact(sock, hdr.rgb_len)
    depth = _recv_exact(sock, hdr.depth_len)
    return _frame_from_parts(hdr, rgb, depth, None)


# --- latest-wins cells ------------------------------------------------------

class LatestCell:
    """Single-slot holder of the newest sample by sequence number.

    ``offer`` never blocks on readers; ``get`` returns the current sample.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._value = None
        self._seq = -1
        self._version = 0
        self.accepted = 0
        self.stale_drops = 0
        self.malformed = 0
        self.ts_regressions = 0
        self._last_ts = None
        self._cond = threading.Condition(self._lock)

    def offer(self, seq: int, value, timestamp_ns: int | None = None) -> bool:
        with self._lock:
            if seq <= self._seq:
                self.stale_drops += 1
                return False
            if timestamp_ns is not None:
                if self._last_ts is not None and timestamp_ns < self._last_ts:
                    self.ts_regressions += 1
                self._last_ts = timestamp_ns
            self._seq = seq
            self._value = value
            self._version += 1
            self.accepted += 1
            self._cond.notify_all()
            return True

    def get(self):
        with self._lock:
            return self._value

    def get_versioned(self):
        with self._lock:
            return self._version, self._value

    def wait_newer(self, version: int, timeout: float | None = None):
        """Block until the cell holds something newer than ``version``."""
        with self._cond:
            self._cond.wait_for(lambda: self._version > version, timeout)
            return self._version, self._value

    @property
    def seq(self) -> int:
        return self._seq

    def handle_pose_datagram(self, data: bytes) -> bool:
        try:
            p = normalize_sample(decode_pose(data))
        except ProtocolError:
            with self._lock:
                self.malformed += 1
            return False
        return self.offer(p.seq, p, p.timestamp_ns)

    def handle_command_datagram(self, data: bytes, seq: int) -> bool:
        try:
            c = decode_command(data)
        except ProtocolError:
            with self._lock:
                self.malformed += 1
            return False
        return self.offer(seq, c, c.timestamp_ns)


class DatagramIngest:
    """Background thread feeding UDP datagrams into a ``LatestCell``."""

    def __init__(self, sock: socket.socket, cell: LatestCell, kind: str = "pose"):
        if kind not in ("pose", "command"):
            raise ValueError(f"unknown ingest kind {kind!r}")
        self.sock = sock
        self.cell = cell
        self.kind = kind
        self.received = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"{kind}-ingest", daemon=True)

    @classmethod
    def bind(cls, host: str, port: int, cell: LatestCell, kind: str = "pose") -> "DatagramIngest":
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 20)
        sock.bind((host, port))
        return cls(sock, cell, kind)

    @property
    def address(self):
        return self.sock.getsockname()

    def start(self) -> "DatagramIngest":
        self._thread.start()
        return self

    def _run(self):
        self.sock.settimeout(0.05)
        while not self._stop.is_set():
            try:
                data = self.sock.recv(2048)
            except socket.timeout:
                continue
            except OSError:
                break
            self.received += 1
            if self.kind == "pose":
                self.cell.handle_pose_datagram(data)
            else:
                # commands carry no sequence number; arrival order stands in for it
                self.cell.handle_command_datagram(data, self.received)

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=1.0)
        self.sock.close()


@dataclass
class _Connection:
    sock: socket.socket
    config: SensorConfig
    slot: LatestCell = field(default_factory=LatestCell)
    sent: int = 0
    alive: bool = True


class FrameServer:
    """TCP frame publisher with one latest-wins slot per connection.

    ``publish(sensor_id, frame)`` never blocks: a slow client simply sees only
    the newest frame when its writer thread gets to it.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_FRAME_PORT):
        self._listener = socket.create_server((host, port), reuse_port=False)
        self._listener.settimeout(0.05)
        self._conns: list[_Connection] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.rejected = 0
        self._accept_thread = threading.Thread(target=self._accept_loop, name="frame-accept", daemon=True)

    @property
    def address(self):
        return self._listener.getsockname()

    def start(self) -> "FrameServer":
        self._accept_thread.start()
        return self

    @property
    def connections(self) -> list[_Connection]:
        with self._lock:
            return [c for c in self._conns if c.alive]

    def wanted_sensors(self) -> set[str]:
        return {c.config.sensor_id for c in self.connections}

    def publish(self, sensor_id: str, frame: FrameRGBD) -> int:
        n = 0
        for c in self.connections:
            if c.config.sensor_id == sensor_id:
                c.slot.offer(frame.seq, frame)
                n += 1
        return n

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve, args=(sock,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve(self, sock: socket.socket):
        sock.settimeout(2.0)
        try:
            (length,) = _U32.unpack(_recv_exact(sock, 4))
            if length > MAX_CONFIG_BYTES:
                raise ProtocolError(f"sensor config of {length} bytes exceeds {MAX_CONFIG_BYTES}")
            cfg = SensorConfig.from_json(_recv_exact(sock, length))
        except (ProtocolError, ConnectionError, socket.timeout) as e:
            self.rejected += 1
            try:
                sock.sendall(encode_error(str(e)))
            except OSError:
                pass
            sock.close()
            return
        conn = _Connection(sock, cfg)
        with self._lock:
            self._conns.append(conn)
        sock.settimeout(None)
        version = 0
        try:
            while not self._stop.is_set():
                newer, frame = conn.slot.wait_newer(version, timeout=0.1)
                if newer == version:
                    continue
                version = newer
                sock.sendall(encode_frame(frame, cfg.depth))
                conn.sent += 1
        except OSError:
            pass
        finally:
            conn.alive = False
            sock.close()

    def stop(self):
        self._stop.set()
        self._accept_thread.join(timeout=1.0)
        self._listener.close()
        for t in self._threads:
            t.join(timeout=1.0)


class FrameClient:
    """Blocking reader for a frame stream."""

    def __init__(self, host: str, port: int, config: SensorConfig, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        send_config(self.sock, config)

    def read(self) -> FrameRGBD:
        return read_frame(self.sock)

    def readable(self, timeout: float = 0.0) -> bool:
        r, _, _ = select.select([self.sock], [], [], timeout)
        return bool(r)

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class DatagramSender:
    def __init__(self, host: str, port: int):
        self.addr = (host, port)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def send_pose(self, p: PoseSample):
        self.sock.sendto(encode_pose(p), self.addr)

    def send_command(self, c: Command):
        self.sock.sendto(encode_command(c), self.addr)

    def close(self):
        self.sock.close()


# --- rate measurement -------------------------------------------------------

class UndefinedRateError(ValueError):
    pass


@dataclass(frozen=True)
class RateStats:
    window_s: float
    frames: int
    hz: float
    p50_gap_ms: float
    p99_gap_ms: float


def measure_rate(timestamps_s, window_s: float | None = None) -> RateStats:
    """Rate over the trailing window [t_last - window_s, t_last].

    Without ``window_s`` the window spans first to last event, and the rate is
    (events - 1) / span, i.e. intervals per second.
    """
    t = np.sort(np.asarray(timestamps_s, dtype=float))
    if len(t) < 2:
        raise UndefinedRateError(f"need at least 2 events, got {len(t)}")
    if window_s is None:
        span = t[-1] - t[0]
        if span <= 0:
            raise UndefinedRateError("all events share one timestamp")
        sel = t
        hz = (len(t) - 1) / span
        window_s = span
    else:
        if window_s <= 0:
            raise ValueError(f"window_s must be positive, got {window_s}")
        sel = t[t >= t[-1] - window_s]
        if len(sel) < 2:
            raise UndefinedRateError("fewer than 2 events inside the window")
        hz = len(sel) / window_s
    gaps = np.diff(sel) * 1e3
    return RateStats(float(window_s), int(len(sel)), float(hz),
                     float(np.percentile(gaps, 50)), float(np.percentile(gaps, 99)))
