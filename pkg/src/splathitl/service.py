"""HTTP control plane around a running ``HitlEngine``.

The real-time data paths stay on UDP/TCP; this API only reports status,
resets runs and serves one-off snapshots.
"""
from __future__ import annotations


from fastapi import FastAPI, HTTPException
from fastapi.responses import Response

from .geometry import Pose6D
from .imaging import depth_to_png, rgb_to_png
from .schemas import EventModel, RunStateModel, SnapshotRequest, StatusResponse
from .transport import PoseSample


def create_app(engine) -> FastAPI:
    app = FastAPI(title="splathitl", version="0.1.0")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.get("/status", response_model=StatusResponse)
    def status() -> StatusResponse:
        s = engine.status()
        return StatusResponse(
            render_hz=s.render_hz, render_p50_ms=s.render_p50_ms, render_p99_ms=s.render_p99_ms,
            frames_rendered=s.frames_rendered, poses_accepted=s.poses_accepted, poses_stale=s.poses_stale,
            poses_malformed=s.poses_malformed, clients=s.clients, run=RunStateModel.from_state(s.run),
        )

    @app.get("/run/events", response_model=list[EventModel])
    def events() -> list[EventModel]:
        return [EventModel(**e.as_dict()) for e in engine.status().run.events]

    @app.post("/run/reset", response_model=RunStateModel)
    def reset() -> RunStateModel:
        return RunStateModel.from_state(engine.reset_run())

    @app.post("/snapshot", responses={200: {"content": {"image/png": {}}}})
    def snapshot(req: SnapshotRequest) -> Response:
        ids = [s.id for s in engine.rig]
        sensor_id = req.sensor_id or ids[0]
        if sensor_id not in ids:
            raise HTTPException(404, f"unknown sensor {sensor_id!r}; known: {ids}")
        pose = Pose6D(req.pose.position, req.pose.quat)
        sample = PoseSample.from_pose(0, int(round(req.t * 1e9)), pose)
        frames = engine.render_once(sample)
        i = ids.index(sensor_id)
        sensor = engine.rig.sensors[i]
        png = depth_to_png(frames[i].depth, sensor.intrinsics) if req.depth else rgb_to_png(frames[i].rgb)
        return Response(content=png, media_type="image/png")

    return app
