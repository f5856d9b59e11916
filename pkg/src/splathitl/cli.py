"""Command-line entry points.

Offline commands (snapshot, bench, grade, eval, build-grid) run locally;
``serve`` starts the live engine plus its HTTP control plane and ``status``
queries that control plane.

Exit codes: 0 ok, 1 internal error, 2 bad config or input, 3 insufficient data.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("splathitl")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _floats(text: str, n: int, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise CliError(f"{what}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise CliError(f"{what}: expected {n} comma-separated numbers, got {len(vals)}")
    return vals


def _scene_from_args(args):
    from .splat_scene import SceneFormatError, SplatScene, load_scene, room_scene

    if getattr(args, "synthetic", None):
        return room_scene(args.synthetic, np.random.default_rng(args.seed))
    if not args.scene:
        return SplatScene.empty()
    path = Path(args.scene)
    if not path.is_file():
        raise CliError(f"scene file not found: {path}")
    try:
        return load_scene(path)
    except SceneFormatError as e:
        raise CliError(f"{path}: {e}") from None


def _intrinsics_from_args(args):
    from .renderer import CameraIntrinsics

    try:
        if args.fx is not None:
            cx = (args.width - 1) / 2 if args.cx is None else args.cx
            cy = (args.height - 1) / 2 if args.cy is None else args.cy
            return CameraIntrinsics(args.fx, args.fy or args.fx, cx, cy, args.width, args.height,
                                    args.near, args.far)
        K = CameraIntrinsics.from_fov(args.width, args.height, args.hfov)
        return CameraIntrinsics(K.fx, K.fy, K.cx, K.cy, K.width, K.height, args.near, args.far)
    except ValueError as e:
        raise CliError(f"intrinsics: {e}") from None


def _add_camera_args(p):
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--hfov", type=float, default=90.0, help="horizontal field of view in degrees")
    p.add_argument("--fx", type=float)
    p.add_argument("--fy", type=float)
    p.add_argument("--cx", type=float)
    p.add_argument("--cy", type=float)
    p.add_argument("--near", type=float, default=0.05)
    p.add_argument("--far", type=float, default=100.0)


def _add_scene_args(p):
    p.add_argument("--scene", help="binary PLY splat file (omit for an empty scene)")
    p.add_argument("--synthetic", type=int, metavar="N", help="use a synthetic room of N Gaussians")
    p.add_argument("--seed", type=int, default=0)


# --- commands ---------------------------------------------------------------

def cmd_snapshot(args) -> int:
    from .geometry import Pose6D, PoseError
    from .imaging import depth_to_png, rgb_to_png
    from .renderer import RenderSettings, render

    vals = _floats(args.pose, 7, "--pose")
    try:
        pose = Pose6D(vals[:3], vals[3:])
    except PoseError as e:
        raise CliError(f"--pose: {e}") from None
    scene = _scene_from_args(args)
    K = _intrinsics_from_args(args)
    bg = tuple(_floats(args.background, 3, "--background"))
    frame = render(scene, pose, K, RenderSettings(background=bg))
    out = Path(args.out)
    rgb_path = out.with_name(out.name + "_rgb.png")
    depth_path = out.with_name(out.name + "_depth.png")
    rgb_path.write_bytes(rgb_to_png(frame.rgb))
    depth_path.write_bytes(depth_to_png(frame.depth, K))
    print(json.dumps({"rgb": str(rgb_path), "depth": str(depth_path),
                      "valid_depth_fraction": float((frame.depth > 0).mean())}))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import DEFAULT_TIERS, TARGET_HZ, format_table, run_bench, scaling_table

    if args.frames < 100:
        raise CliError(f"--frames must be at least 100, got {args.frames}")
    K = _intrinsics_from_args(args)
    if args.tiers:
        tiers = DEFAULT_TIERS if args.tiers == "default" else [int(v) for v in args.tiers.split(",")]
        rows = scaling_table(tiers, K.width, K.height, args.hfov, args.frames, args.seed)
        if args.json:
            print(json.dumps([r.as_dict() for r in rows], indent=2))
        else:
            print(format_table(rows, TARGET_HZ))
        return EXIT_OK
    scene = _scene_from_args(args)
    r = run_bench(scene, K, args.frames, args.seed)
    if args.json:
        print(json.dumps(r.as_dict()))
    else:
        print(format_table([r], TARGET_HZ))
    return EXIT_OK


def read_pose_log(path) -> list:
    """Pose trace CSV ``t_ns,x,y,z,qw,qx,qy,qz``; seq is the 1-based data row index."""
    from .transport import PoseSample

    samples = []
    try:
        f = open(path, newline="")
    except OSError as e:
        raise CliError(f"cannot read pose log {path}: {e.strerror}") from None
    with f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or (lineno == 1 and row[0].strip() == "t_ns"):
                continue
            if len(row) != 8:
                raise CliError(f"{path}:{lineno}: expected 8 columns, got {len(row)}")
            try:
                t = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as e:
                raise CliError(f"{path}:{lineno}: {e}") from None
            if not all(np.isfinite(vals)) or sum(q * q for q in vals[3:]) < 1e-12:
                raise CliError(f"{path}:{lineno}: non-finite value or zero quaternion")
            n = float(np.sqrt(sum(q * q for q in vals[3:])))
            samples.append(PoseSample(len(samples) + 1, t, tuple(vals[:3]), tuple(q / n for q in vals[3:])))
    if not samples:
        raise CliError(f"{path}: no pose rows", EXIT_DATA)
    return samples


def cmd_grade(args) -> int:
    from . import run_supervisor as rs
    from .config import load_config

    cfg = load_config(args.config)
    samples = read_pose_log(args.trace)
    scene = cfg.load_scene()
    course = cfg.build_course(cfg.build_grid(scene))
    state, commands = rs.replay(course, samples)
    events_path = args.events or cfg.events_path
    if events_path:
        rs.write_events(state, events_path)
    board = args.leaderboard or cfg.leaderboard_path
    team = args.team or cfg.team
    if not args.no_leaderboard:
        rs.append_leaderboard(rs.LeaderboardRecord.from_state(team, state), board, len(course.gates))
    print(json.dumps({
        "team": team,
        "status": state.status.value,
        "stages_completed": state.stages_completed,
        "n_gates": state.n_gates,
        "elapsed_s": state.elapsed_s,
        "land_commands": len(commands),
        "events": [e.as_dict() for e in state.events],
    }, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import (
        DegenerateAlignmentError,
        InsufficientOverlapError,
        TrajectoryFormatError,
        compute_ate,
        load_trajectory_csv,
    )

    for p in (args.est, args.gt):
        if not Path(p).is_file():
            raise CliError(f"trajectory file not found: {p}")
    try:
        est = load_trajectory_csv(args.est)
        gt = load_trajectory_csv(args.gt)
        report = compute_ate(est, gt, args.max_dt, args.scale)
    except TrajectoryFormatError as e:
        raise CliError(str(e)) from None
    except (InsufficientOverlapError, DegenerateAlignmentError) as e:
        raise CliError(str(e), EXIT_DATA) from None
    print(json.dumps(report.as_dict(), indent=2))
    return EXIT_OK


def cmd_build_grid(args) -> int:
    from .config import load_config
    from .world_model import export_grid

    cfg = load_config(args.config)
    grid = cfg.build_grid(cfg.load_scene())
    if grid is None:
        raise CliError(f"no Gaussians with opacity >= {cfg.opacity_min}; grid undefined", EXIT_DATA)
    export_grid(grid, args.out)
    print(json.dumps({"out": args.out, "dims": list(grid.dims), "origin": grid.origin.tolist(),
                      "voxel_size": grid.voxel_size, "occupied": grid.count()}))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .config import load_config
    from .engine import HitlEngine
    from .service import create_app

    from .splat_scene import SceneFormatError

    cfg = load_config(args.config)
    try:
        engine = HitlEngine(cfg)
    except SceneFormatError as e:
        raise CliError(f"{cfg.scene_path}: {e}") from None
    try:
        engine.start()
    except OSError as e:
        engine.stop()
        raise CliError(f"cannot start engine: {e}") from None
    stop = threading.Event()

    def report():
        while not stop.wait(1.0):
            s = engine.status()
            hz = f"{s.render_hz:.1f}" if s.render_hz is not None else "-"
            print(f"render {hz} Hz  frames {s.frames_rendered}  poses {s.poses_accepted}  "
                  f"clients {s.clients}  run {s.run.status.value} stage {s.run.stage}/{s.run.n_gates}", flush=True)

    threading.Thread(target=report, daemon=True).start()
    server = uvicorn.Server(uvicorn.Config(create_app(engine), host=cfg.ports.host, port=cfg.ports.http,
                                           log_level="warning"))
    try:
        if args.duration is not None:
            threading.Thread(target=server.run, daemon=True).start()
            deadline = time.monotonic() + args.duration
            while time.monotonic() < deadline and not engine.supervisor.done:
                time.sleep(0.05)
            if engine.supervisor.done:
                time.sleep(0.2)  # let the grader thread persist the run
            server.should_exit = True
        else:
            server.run()
    finally:
        stop.set()
        engine.stop()
    return EXIT_OK


def cmd_status(args) -> int:
    import httpx

    try:
        r = httpx.get(f"http://{args.host}:{args.port}/status", timeout=2.0)
    except httpx.HTTPError as e:
        raise CliError(f"cannot reach engine at {args.host}:{args.port}: {e}", EXIT_INTERNAL) from None
    print(json.dumps(r.json(), indent=2))
    return EXIT_OK if r.status_code == 200 else EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splathitl", description="Splat-rendered hardware-in-the-loop engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the live engine and its HTTP control plane")
    s.add_argument("config")
    s.add_argument("--duration", type=float, help="stop after this many seconds or when the run ends")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("snapshot", help="render one RGB + depth PNG pair")
    _add_scene_args(s)
    _add_camera_args(s)
    s.add_argument("--pose", default="0,0,0,1,0,0,0", help="camera pose x,y,z,qw,qx,qy,qz (OpenCV axes)")
    s.add_argument("--background", default="0,0,0")
    s.add_argument("--out", required=True, help="output prefix; writes <out>_rgb.png and <out>_depth.png")
    s.set_defaults(func=cmd_snapshot)

    s = sub.add_parser("bench", help="measure render throughput")
    _add_scene_args(s)
    _add_camera_args(s)
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--tiers", help="comma-separated Gaussian counts for a synthetic scaling table, or 'default'")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("grade", help="replay a pose log through the grader")
    s.add_argument("config")
    s.add_argument("trace")
    s.add_argument("--team")
    s.add_argument("--leaderboard")
    s.add_argument("--events")
    s.add_argument("--no-leaderboard", action="store_true")
    s.set_defaults(func=cmd_grade)

    s = sub.add_parser("eval", help="absolute trajectory error between two CSV trajectories")
    s.add_argument("est")
    s.add_argument("gt")
    s.add_argument("--max-dt", type=float, default=0.02)
    s.add_argument("--scale", action="store_true", help="allow a scale factor in the alignment")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("build-grid", help="export the static occupancy grid of a scenario")
    s.add_argument("config")
    s.add_argument("out")
    s.set_defaults(func=cmd_build_grid)

    s = sub.add_parser("status", help="query a running engine")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=int(os.environ.get("SPLATHITL_HTTP_PORT", 8155)))
    s.set_defaults(func=cmd_status)
    return p


def _raise_interrupt(signum, frame):
    raise KeyboardInterrupt


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "serve":
        signal.signal(signal.SIGTERM, _raise_interrupt)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as e:  # noqa: BLE001 - last-resort reporting
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
