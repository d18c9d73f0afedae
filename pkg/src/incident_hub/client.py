"""HTTP client for a running hub, mirroring the in-process :class:`Hub` methods.

Error responses are re-raised as the same exception class the hub raised,
so callers (the CLI, the replay driver) handle both back-ends identically.
"""

from __future__ import annotations

import json
from typing import Iterator, Sequence

import httpx

from . import errors
from .geo import Station
from .hub import Ack
from .identity import MatchResult, SuspectRecord
from .summarizer import Summary


def _raise_for_error(resp: httpx.Response) -> None:
    if resp.status_code < 400:
        return
    try:
        err = resp.json()["error"]
        code, message = err["code"], err["message"]
    except (ValueError, KeyError, TypeError):
        resp.raise_for_status()
        return
    cls = getattr(errors, code, None)
    if isinstance(cls, type) and issubclass(cls, errors.HubError) and cls not in (errors.ParseError, errors.ConnectionLost):
        raise cls(message)
    if code == "BadRequest":
        raise ValueError(message)
    raise errors.HubError(f"{code}: {message}")


class HubClient:
    def __init__(self, base_url: str, token: str | None = None, timeout: float = 10.0, transport=None) -> None:
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.http = httpx.Client(base_url=base_url, headers=headers, timeout=timeout, transport=transport)

    @classmethod
    def from_httpx(cls, http: httpx.Client) -> "HubClient":
        """Wrap an existing httpx-compatible client (e.g. a FastAPI TestClient)."""
        self = cls.__new__(cls)
        self.http = http
        return self

    def close(self) -> None:
        self.http.close()

    def _call(self, method: str, url: str, **kw):
        resp = self.http.request(method, url, **kw)
        _raise_for_error(resp)
        return resp.json()

    def submit_event(self, event: dict | str | bytes) -> Ack:
        content = event if isinstance(event, (str, bytes)) else json.dumps(event)
        d = self._call("POST", "/events", content=content, headers={"Content-Type": "application/json"})
        return Ack(d["accepted"], d["dedup"], d["outcome"], d.get("sequence"), d.get("details") or {})

    def put_suspect(self, suspect: SuspectRecord | dict, face: Sequence = (), fingerprint: Sequence = ()) -> dict:
        body = suspect.to_dict() if isinstance(suspect, SuspectRecord) else dict(suspect)
        return self._call(
            "POST", "/suspects",
            json={"suspect": body, "face": [list(map(float, v)) for v in face],
                  "fingerprint": [list(map(float, v)) for v in fingerprint]},
        )

    def list_suspects(self) -> list[SuspectRecord]:
        return [SuspectRecord.from_dict(d) for d in self._call("GET", "/suspects")]

    def get_suspect(self, suspect_id: str) -> SuspectRecord:
        return SuspectRecord.from_dict(self._call("GET", f"/suspects/{suspect_id}"))

    def put_station(self, station: Station | dict) -> dict:
        body = station.to_dict() if isinstance(station, Station) else station
        return self._call("POST", "/stations", json=body)

    def list_stations(self) -> list[Station]:
        return [Station.from_dict(d) for d in self._call("GET", "/stations")]

    def get_incident(self, incident_id: str) -> dict:
        return self._call("GET", f"/incidents/{incident_id}")

    def list_incidents(self, site_id: str | None = None, state: str | None = None) -> list[dict]:
        params = {k: v for k, v in (("site_id", site_id), ("state", state)) if v is not None}
        return self._call("GET", "/incidents", params=params)

    def attach_report(self, incident_id: str, text: str) -> dict:
        return self._call("PUT", f"/incidents/{incident_id}/report", json={"text": text})

    def acknowledge_alarm(self, alarm_id: str, officer_id: str) -> dict:
        return self._call("POST", f"/alarms/{alarm_id}/acknowledge", json={"officer_id": officer_id})

    def resolve_alarm(self, alarm_id: str, actor: str) -> dict:
        return self._call("POST", f"/alarms/{alarm_id}/resolve", json={"actor": actor})

    def summarize_report(self, incident_id=None, text=None, ratio=None, k=None) -> Summary:
        d = self._call("POST", "/summarize", json={"incident_id": incident_id, "text": text, "ratio": ratio, "k": k})
        return Summary(tuple(d["indices"]), tuple(d["sentences"]), tuple(d["scores"]), d["params"])

    def identify(self, modality: str, probe: Sequence[float]) -> MatchResult:
        d = self._call("POST", "/match", json={"modality": str(getattr(modality, "value", modality)), "probe": list(map(float, probe))})
        return MatchResult(d["decision"], d["best_score"], d["threshold_used"], d.get("suspect_id"), d.get("key"))

    def digest(self) -> str:
        return self._call("GET", "/state/digest")["digest"]

    def notices_after(self, last_seen: str | None = None, station_id: str | None = None) -> list[dict]:
        params = {k: v for k, v in (("after", last_seen), ("station_id", station_id)) if v is not None}
        return self._call("GET", "/notices", params=params)

    def stream_notices(
        self,
        station_id: str | None = None,
        last_seen: str | None = None,
        limit: int | None = None,
        timeout: float | None = None,
    ) -> Iterator[dict]:
        """Yield notice envelopes from the SSE stream, resuming after ``last_seen``."""
        params = {k: v for k, v in (("station_id", station_id), ("limit", limit), ("timeout", timeout)) if v is not None}
        headers = {"Last-Event-ID": last_seen} if last_seen else {}
        with self.http.stream("GET", "/notices/stream", params=params, headers=headers, timeout=None) as resp:
            if resp.status_code >= 400:
                resp.read()
                _raise_for_error(resp)
            yield from parse_sse(resp.iter_lines())


def parse_sse(lines) -> Iterator[dict]:
    """Decode ``event: notice`` frames from an iterable of SSE lines."""
    data: list[str] = []
    event = "message"
    for line in lines:
        if line == "":
            if data and event == "notice":
                yield json.loads("\n".join(data))
            data, event = [], "message"
        elif line.startswith(":"):
            continue
        elif line.startswith("data:"):
            data.append(line[5:].lstrip())
        elif line.startswith("event:"):
            event = line[6:].strip()
