"""Request and response models for the HTTP control plane."""
from __future__ import annotations

from pydantic import BaseModel, Field, field_validator


class EventModel(BaseModel):
    t_ns: int
    kind: str
    detail: str = ""


class RunStateModel(BaseModel):
    status: str
    stage: int
    n_gates: int
    t_start_ns: int | None = None
    t_end_ns: int | None = None
    elapsed_s: float
    events: list[EventModel] = []

    @classmethod
    def from_state(cls, s) -> "RunStateModel":
        return cls(status=s.status.value, stage=s.stage, n_gates=s.n_gates, t_start_ns=s.t_start_ns,
                   t_end_ns=s.t_end_ns, elapsed_s=s.elapsed_s, events=[EventModel(**e.as_dict()) for e in s.events])


class StatusResponse(BaseModel):
    render_hz: float | None = Field(None, description="render rate over the last second")
    render_p50_ms: float | None = None
    render_p99_ms: float | None = None
    frames_rendered: int
    poses_accepted: int
    poses_stale: int
    poses_malformed: int
    clients: int
    run: RunStateModel


class PoseModel(BaseModel):
    position: tuple[float, float, float]
    quat: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    @field_validator("quat")
    @classmethod
    def _nonzero(cls, q):
        if sum(v * v for v in q) < 1e-12:
            raise ValueError("quaternion must be non-zero")
        return q


class SnapshotRequest(BaseModel):
    pose: PoseModel
    sensor_id: str | None = None
    depth: bool = False
    t: float = Field(0.0, ge=0.0, description="window time in seconds for the hand overlay")
