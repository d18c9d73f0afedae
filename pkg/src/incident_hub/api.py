"""HTTP API over a :class:`~incident_hub.hub.Hub`.

Request and response bodies are JSON with the same snake_case field names
as the domain objects. Errors come back as ``{"error": {"code", "message"}}``
with the code naming the exception class. Notices are pushed over a
server-sent event stream at ``GET /notices/stream``; each SSE ``id`` is the
notice id, and ``Last-Event-ID`` (or ``?last_event_id=``) resumes after it.
"""

from __future__ import annotations

import asyncio
import json
import time

from fastapi import Depends, FastAPI, Header, Query, Request
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel

from .errors import AuthFailure, HubError, PayloadTooLarge
from .hub import Hub

STREAM_POLL_SECONDS = 0.05
HEARTBEAT_SECONDS = 15.0


class AckBody(BaseModel):
    officer_id: str


class ResolveBody(BaseModel):
    actor: str


class ReportBody(BaseModel):
    text: str


class SummarizeBody(BaseModel):
    incident_id: str | None = None
    text: str | None = None
    ratio: float | None = None
    k: int | None = None


class MatchBody(BaseModel):
    modality: str
    probe: list[float]


class SuspectBody(BaseModel):
    suspect: dict
    face: list[list[float]] = []
    fingerprint: list[list[float]] = []


def _bearer(authorization: str | None) -> str | None:
    if authorization and authorization.lower().startswith("bearer "):
        return authorization[7:].strip()
    return None


def create_app(hub: Hub) -> FastAPI:
    app = FastAPI(title="incident-hub", version="0.1.0")
    app.state.hub = hub

    @app.exception_handler(HubError)
    async def hub_error(_: Request, exc: HubError) -> JSONResponse:
        return JSONResponse(status_code=exc.status, content={"error": exc.to_dict()})

    @app.exception_handler(ValueError)
    async def value_error(_: Request, exc: ValueError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"error": {"code": "BadRequest", "message": str(exc)}})

    def authenticated(authorization: str | None = Header(default=None)) -> str | None:
        token = _bearer(authorization)
        if hub.config.auth_enabled and token not in hub.config.tokens:
            raise AuthFailure("invalid or missing bearer token")
        return token

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "last_seq": hub.last_seq}

    @app.post("/events")
    async def submit_event(request: Request, _: str | None = Depends(authenticated)) -> dict:
        body = await request.body()
        if len(body) > hub.config.max_embedding_bytes:
            raise PayloadTooLarge(f"event payload of {len(body)} bytes exceeds {hub.config.max_embedding_bytes}")
        return hub.submit_event(body).to_dict()

    @app.post("/suspects")
    def put_suspect(body: SuspectBody, _: str | None = Depends(authenticated)) -> dict:
        return hub.put_suspect(body.suspect, body.face, body.fingerprint)

    @app.get("/suspects")
    def list_suspects(_: str | None = Depends(authenticated)) -> list[dict]:
        return [s.to_dict() for s in hub.list_suspects()]

    @app.get("/suspects/{suspect_id}")
    def get_suspect(suspect_id: str, _: str | None = Depends(authenticated)) -> dict:
        return hub.get_suspect(suspect_id).to_dict()

    @app.post("/stations")
    def put_station(body: dict, _: str | None = Depends(authenticated)) -> dict:
        return hub.put_station(body)

    @app.get("/stations")
    def list_stations(_: str | None = Depends(authenticated)) -> list[dict]:
        return [s.to_dict() for s in hub.list_stations()]

    @app.get("/incidents")
    def list_incidents(
        site_id: str | None = None, state: str | None = None, _: str | None = Depends(authenticated)
    ) -> list[dict]:
        return hub.list_incidents(site_id, state)

    @app.get("/incidents/{incident_id}")
    def get_incident(incident_id: str, _: str | None = Depends(authenticated)) -> dict:
        return hub.get_incident(incident_id)

    @app.put("/incidents/{incident_id}/report")
    def attach_report(incident_id: str, body: ReportBody, _: str | None = Depends(authenticated)) -> dict:
        return hub.attach_report(incident_id, body.text)

    @app.post("/alarms/{alarm_id}/acknowledge")
    def acknowledge(alarm_id: str, body: AckBody, _: str | None = Depends(authenticated)) -> dict:
        return hub.acknowledge_alarm(alarm_id, body.officer_id)

    @app.post("/alarms/{alarm_id}/resolve")
    def resolve(alarm_id: str, body: ResolveBody, _: str | None = Depends(authenticated)) -> dict:
        return hub.resolve_alarm(alarm_id, body.actor)

    @app.post("/summarize")
    def summarize(body: SummarizeBody, _: str | None = Depends(authenticated)) -> dict:
        return hub.summarize_report(body.incident_id, body.text, body.ratio, body.k).to_dict()

    @app.post("/match")
    def identify(body: MatchBody, _: str | None = Depends(authenticated)) -> dict:
        return hub.identify(body.modality, body.probe).to_dict()

    @app.get("/notices")
    def list_notices(
        station_id: str | None = None,
        after: str | None = None,
        authorization: str | None = Header(default=None),
    ) -> list[dict]:
        hub.authorize(_bearer(authorization), station_id)
        return hub.notices_after(after, station_id)

    @app.post("/notices/{notice_id}/retry")
    def retry_notice(notice_id: str, _: str | None = Depends(authenticated)) -> dict:
        return hub.retry_notice(notice_id)

    @app.get("/notices/stream")
    async def stream_notices(
        request: Request,
        station_id: str | None = None,
        last_event_id: str | None = None,
        limit: int | None = Query(default=None, ge=1),
        timeout: float | None = Query(default=None, gt=0),
        authorization: str | None = Header(default=None),
        last_event_header: str | None = Header(default=None, alias="Last-Event-ID"),
    ) -> StreamingResponse:
        hub.authorize(_bearer(authorization), station_id)
        sub = hub.subscribe(station_id, last_event_id or last_event_header)

        async def events():
            sent = 0
            started = last_beat = time.monotonic()
            yield ": subscribed\n\n"
            while True:
                for env in sub.poll():
                    nid = env["notice"]["notice_id"]
                    yield f"id: {nid}\nevent: notice\ndata: {json.dumps(env)}\n\n"
                    sent += 1
                    if limit is not None and sent >= limit:
                        return
                now = time.monotonic()
                if timeout is not None and now - started >= timeout:
                    return
                if await request.is_disconnected():
                    return
                if now - last_beat >= HEARTBEAT_SECONDS:
                    last_beat = now
                    yield ": keepalive\n\n"
                await asyncio.sleep(STREAM_POLL_SECONDS)

        return StreamingResponse(events(), media_type="text/event-stream", headers={"Cache-Control": "no-cache"})

    @app.get("/state/digest")
    def digest(_: str | None = Depends(authenticated)) -> dict:
        return {"digest": hub.digest(), "last_seq": hub.last_seq}

    return app
