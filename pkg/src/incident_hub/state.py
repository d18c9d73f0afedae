"""Hub state derived from the record log.

``HubState.apply`` is the only way state changes, and it is a pure function
of the record sequence: timestamps and ids come from the records and from
counters inside the state. Replaying the same log therefore rebuilds the same
state, which ``digest`` reduces to one sha256.

Record types: ``event``, ``suspect_put``, ``gallery_put``, ``station_put``,
``report_put``, ``ack``, ``resolve``, ``delivery``, ``notice_retry``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta

from .alarms import AlarmEngine, AlarmState
from .clock import format_ts, parse_ts
from .config import HubConfig
from .errors import (
    DuplicateId,
    HubError,
    IllegalTransition,
    NoStations,
    NotFound,
    UnknownSite,
)
from .events import DetectionEvent, EventKind, parse_event
from .geo import DeliveryStatus, Notice, Station, compose_notice, nearest_station
from .identity import (
    ANONYMOUS_ID_PREFIX,
    Gallery,
    GalleryEntry,
    Modality,
    SuspectRecord,
    SuspectRegistry,
    identify_face,
    identify_fingerprint,
    normalize,
)
from .persistence import state_digest


@dataclass
class NoticeEnvelope:
    notice: Notice
    next_retry_at: datetime
    max_attempts: int
    attempt_count: int = 0
    flagged: bool = False
    last_error: str | None = None

    def to_dict(self) -> dict:
        return {
            "notice": self.notice.to_dict(),
            "attempt_count": self.attempt_count,
            "next_retry_at": format_ts(self.next_retry_at),
            "max_attempts": self.max_attempts,
            "flagged": self.flagged,
            "last_error": self.last_error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoticeEnvelope":
        return cls(
            notice=Notice.from_dict(d["notice"]),
            next_retry_at=parse_ts(d["next_retry_at"]),
            max_attempts=int(d["max_attempts"]),
            attempt_count=int(d["attempt_count"]),
            flagged=bool(d["flagged"]),
            last_error=d.get("last_error"),
        )


@dataclass
class IncidentRecord:
    incident_id: str
    alarm_id: str
    site_id: str
    triggering_event: dict
    notice_id: str | None = None
    status_history: list[dict] = field(default_factory=list)
    report: str | None = None
    summary: dict | None = None  # cached on demand, not part of the durable state

    def to_dict(self) -> dict:
        return {
            "incident_id": self.incident_id,
            "alarm_id": self.alarm_id,
            "site_id": self.site_id,
            "triggering_event": self.triggering_event,
            "notice_id": self.notice_id,
            "status_history": list(self.status_history),
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IncidentRecord":
        return cls(
            incident_id=d["incident_id"],
            alarm_id=d["alarm_id"],
            site_id=d["site_id"],
            triggering_event=d["triggering_event"],
            notice_id=d.get("notice_id"),
            status_history=list(d.get("status_history", [])),
            report=d.get("report"),
        )


def _fmt_score(x: float) -> str:
    return f"{x:.4f}"


class HubState:
    def __init__(self, config: HubConfig) -> None:
        self.config = config
        self.suspects = SuspectRegistry()
        self.galleries = {m: Gallery(m, config.dims) for m in Modality}
        self.stations: dict[str, Station] = {}
        self.engine = AlarmEngine(config.sites, config.confidence_gate, config.debounce_seconds)
        self.incidents: dict[str, IncidentRecord] = {}
        self.envelopes: dict[str, NoticeEnvelope] = {}
        self.notice_order: list[str] = []
        self.sightings: list[dict] = []
        self.seen: set[str] = set()
        self.notice_counter = 0

    # keyed CRUD

    def get_suspect(self, suspect_id: str) -> SuspectRecord:
        return self.suspects.get(suspect_id)

    def list_suspects(self) -> list[SuspectRecord]:
        return self.suspects.list()

    def get_station(self, station_id: str) -> Station:
        try:
            return self.stations[station_id]
        except KeyError:
            raise NotFound(f"station {station_id!r} not found") from None

    def list_stations(self) -> list[Station]:
        return [self.stations[k] for k in sorted(self.stations)]

    def get_incident(self, incident_id: str) -> IncidentRecord:
        try:
            return self.incidents[incident_id]
        except KeyError:
            raise NotFound(f"incident {incident_id!r} not found") from None

    def list_incidents(self, site_id: str | None = None, state: str | None = None) -> list[IncidentRecord]:
        out = []
        for key in sorted(self.incidents):
            inc = self.incidents[key]
            if site_id is not None and inc.site_id != site_id:
                continue
            if state is not None and self.engine.alarms[inc.alarm_id].state.value != state:
                continue
            out.append(inc)
        return out

    def get_envelope(self, notice_id: str) -> NoticeEnvelope:
        try:
            return self.envelopes[notice_id]
        except KeyError:
            raise NotFound(f"notice {notice_id!r} not found") from None

    def incident_view(self, incident_id: str) -> dict:
        inc = self.get_incident(incident_id)
        d = inc.to_dict()
        d["alarm"] = self.engine.alarms[inc.alarm_id].to_dict()
        d["notice"] = self.envelopes[inc.notice_id].to_dict() if inc.notice_id else None
        d["summary"] = inc.summary
        return d

    # validation, run before a record is logged

    def is_duplicate(self, event: DetectionEvent) -> bool:
        return event.dedup_key in self.seen

    def validate(self, record: dict) -> None:
        kind = record["type"]
        if kind == "event":
            event = parse_event(record["event"], self.config.dims, max_embedding_bytes=0)
            if event.site_id not in self.config.sites:
                raise UnknownSite(f"unknown site {event.site_id!r}")
            if event.suspect_hint is not None:
                self.get_suspect(event.suspect_hint)
        elif kind == "suspect_put":
            suspect = SuspectRecord.from_dict(record["suspect"])
            if suspect.suspect_id in self.suspects:
                raise DuplicateId(f"suspect {suspect.suspect_id!r} already exists")
            if suspect.suspect_id.startswith(ANONYMOUS_ID_PREFIX):
                raise DuplicateId(f"suspect ids starting with {ANONYMOUS_ID_PREFIX!r} are reserved")
            for modality in Modality:
                for emb in record.get(modality.value.lower(), []):
                    normalize(emb, self.config.dims)
        elif kind == "gallery_put":
            keys = set()
            for d in record["entries"]:
                entry = GalleryEntry.from_dict(d)
                self.get_suspect(entry.suspect_id)
                if entry.key in self.galleries[entry.modality] or (entry.modality, entry.key) in keys:
                    raise DuplicateId(f"gallery key {entry.key!r} already enrolled")
                keys.add((entry.modality, entry.key))
                normalize(d["embedding"], self.config.dims)
        elif kind == "station_put":
            station = Station.from_dict(record["station"])
            if station.station_id in self.stations:
                raise DuplicateId(f"station {station.station_id!r} already exists")
        elif kind == "report_put":
            self.get_incident(record["incident_id"])
        elif kind == "ack":
            self.engine.check(record["alarm_id"], AlarmState.ACKNOWLEDGED)
        elif kind == "resolve":
            self.engine.check(record["alarm_id"], AlarmState.RESOLVED)
        elif kind == "delivery":
            env = self.get_envelope(record["notice_id"])
            if env.notice.status is not DeliveryStatus.PENDING:
                raise IllegalTransition(f"notice {env.notice.notice_id} is {env.notice.status.value}")
        elif kind == "notice_retry":
            env = self.get_envelope(record["notice_id"])
            if env.notice.status is not DeliveryStatus.FAILED:
                raise IllegalTransition(f"notice {env.notice.notice_id} is {env.notice.status.value}, not Failed")
        else:
            raise ValueError(f"unknown record type {kind!r}")

    # application

    def apply(self, record: dict) -> dict:
        handler = getattr(self, f"_apply_{record['type']}")
        return handler(record)

    def _apply_event(self, record: dict) -> dict:
        event = parse_event(record["event"], self.config.dims, max_embedding_bytes=0)
        self.seen.add(event.dedup_key)
        if event.kind is EventKind.WEAPON_DETECTION:
            return self._weapon(event)
        probe = event.normalized_embedding()
        sighting = {
            "event_id": event.event_id,
            "site_id": event.site_id,
            "modality": "Face" if event.kind is EventKind.FACE_SIGHTING else "Fingerprint",
            "observed_at": format_ts(event.observed_at),
        }
        if event.kind is EventKind.FACE_SIGHTING:
            result = identify_face(probe, self.galleries[Modality.FACE], self.config.face_threshold)
            enrolled = False
            if result.is_match:
                outcome = f"face matched {result.suspect_id} (score={_fmt_score(result.best_score)})"
            else:
                outcome = f"unidentified face sighting (best_score={_fmt_score(result.best_score)})"
        else:
            hint = self.get_suspect(event.suspect_hint) if event.suspect_hint else None
            result, enrolled = identify_fingerprint(
                probe,
                self.galleries[Modality.FINGERPRINT],
                self.suspects,
                suspect_hint=hint,
                threshold=self.config.fingerprint_threshold,
                at=event.observed_at,
            )
            if result.is_match:
                outcome = f"fingerprint matched {result.suspect_id} (score={_fmt_score(result.best_score)})"
            else:
                owner = self.suspects.get(self.galleries[Modality.FINGERPRINT].view().suspect_ids[-1])
                outcome = f"enrolled as {owner.name}"
                sighting["enrolled_suspect_id"] = owner.suspect_id
        sighting.update(result.to_dict(), enrolled=enrolled)
        self.sightings.append(sighting)
        return {"outcome": outcome, "match": result.to_dict(), "enrolled": enrolled}

    def _weapon(self, event: DetectionEvent) -> dict:
        detection = event.weapon_detection()
        action = self.engine.ingest_weapon_event(detection, event.observed_at)
        if action.kind == "IgnoredLowConfidence":
            return {
                "outcome": f"ignored: confidence {detection.confidence} at or below gate {self.engine.confidence_gate}",
                "action": action.kind,
            }
        if action.kind == "AttachedToActive":
            return {"outcome": f"attached to active alarm {action.alarm_id}", "action": action.kind, "alarm_id": action.alarm_id}
        alarm_id = action.alarm_id
        incident_id = "INC-" + alarm_id.split("-", 1)[1]
        self.incidents[incident_id] = IncidentRecord(incident_id, alarm_id, event.site_id, event.to_dict())
        result = {"action": action.kind, "alarm_id": alarm_id, "incident_id": incident_id}
        try:
            notice = self._dispatch(alarm_id, event.observed_at)
        except NoStations:
            result["outcome"] = f"alarm {alarm_id} triggered, no station registered; dispatch deferred"
            return result
        result.update(notice_id=notice.notice_id, station_id=notice.station_id)
        result["outcome"] = f"alarm {alarm_id} triggered, notice {notice.notice_id} queued for station {notice.station_id}"
        return result

    def _dispatch(self, alarm_id: str, at: datetime) -> Notice:
        alarm = self.engine.get(alarm_id)
        station = nearest_station(alarm.triggering_detection.position, self.list_stations())
        self.notice_counter += 1
        notice = compose_notice(
            alarm, station, f"NTC-{self.notice_counter:06d}", self.config.sites[alarm.site_id], now=at
        )
        self.envelopes[notice.notice_id] = NoticeEnvelope(notice, at, self.config.max_attempts)
        self.notice_order.append(notice.notice_id)
        incident = self.incidents["INC-" + alarm_id.split("-", 1)[1]]
        incident.notice_id = notice.notice_id
        incident.status_history.append({"status": "Pending", "at": format_ts(at), "attempt": 0, "detail": "queued"})
        return notice

    def _apply_suspect_put(self, record: dict) -> dict:
        suspect = self.suspects.put(SuspectRecord.from_dict(record["suspect"]))
        at = parse_ts(record["at"])
        keys = []
        for modality in Modality:
            for emb in record.get(modality.value.lower(), []):
                keys.append(self.galleries[modality].enroll(suspect.suspect_id, emb, enrolled_at=at).key)
        return {"outcome": f"suspect {suspect.suspect_id} stored", "suspect_id": suspect.suspect_id, "keys": keys}

    def _apply_gallery_put(self, record: dict) -> dict:
        for d in record["entries"]:
            entry = GalleryEntry.from_dict(d)
            self.galleries[entry.modality].enroll(entry.suspect_id, entry.embedding, entry.enrolled_at, key=entry.key)
        return {"outcome": f"{len(record['entries'])} gallery entries imported"}

    def _apply_station_put(self, record: dict) -> dict:
        station = Station.from_dict(record["station"])
        self.stations[station.station_id] = station
        at = parse_ts(record["at"])
        dispatched = []
        for alarm_id in sorted(self.engine.alarms):
            alarm = self.engine.alarms[alarm_id]
            if alarm.state is AlarmState.TRIGGERED and alarm.station_id is None:
                dispatched.append(self._dispatch(alarm_id, at).notice_id)
        return {"outcome": f"station {station.station_id} stored", "dispatched": dispatched}

    def _apply_report_put(self, record: dict) -> dict:
        incident = self.get_incident(record["incident_id"])
        incident.report = record["text"]
        incident.summary = None
        return {"outcome": f"report attached to {incident.incident_id}"}

    def _apply_ack(self, record: dict) -> dict:
        alarm = self.engine.acknowledge(record["alarm_id"], record["officer_id"], parse_ts(record["at"]))
        return {"outcome": f"alarm {alarm.alarm_id} acknowledged", "alarm": alarm.to_dict()}

    def _apply_resolve(self, record: dict) -> dict:
        alarm = self.engine.resolve(record["alarm_id"], record["actor"], parse_ts(record["at"]))
        return {"outcome": f"alarm {alarm.alarm_id} resolved", "alarm": alarm.to_dict()}

    def _incident_for_notice(self, notice: Notice) -> IncidentRecord:
        return self.incidents["INC-" + notice.alarm_id.split("-", 1)[1]]

    def _apply_delivery(self, record: dict) -> dict:
        env = self.get_envelope(record["notice_id"])
        at = parse_ts(record["at"])
        env.attempt_count = int(record["attempt"])
        history = self._incident_for_notice(env.notice).status_history
        if record["ok"]:
            env.notice.set_status(DeliveryStatus.DELIVERED)
            env.last_error = None
            history.append({"status": "Delivered", "at": format_ts(at), "attempt": env.attempt_count, "detail": "delivered"})
            return {"outcome": "Delivered", "attempt": env.attempt_count}
        env.last_error = record.get("error") or "delivery failed"
        if env.attempt_count >= env.max_attempts:
            env.notice.set_status(DeliveryStatus.FAILED)
            env.flagged = True
            history.append({"status": "Failed", "at": format_ts(at), "attempt": env.attempt_count, "detail": env.last_error})
            return {"outcome": "Failed", "attempt": env.attempt_count}
        delay = self.config.retry_base_seconds * self.config.retry_factor ** (env.attempt_count - 1)
        env.next_retry_at = at + timedelta(seconds=delay)
        history.append({"status": "Pending", "at": format_ts(at), "attempt": env.attempt_count, "detail": f"retry in {delay:g}s: {env.last_error}"})
        return {"outcome": "Retrying", "attempt": env.attempt_count, "next_retry_at": format_ts(env.next_retry_at)}

    def _apply_notice_retry(self, record: dict) -> dict:
        env = self.get_envelope(record["notice_id"])
        at = parse_ts(record["at"])
        env.notice.set_status(DeliveryStatus.PENDING)
        env.attempt_count = 0
        env.flagged = False
        env.next_retry_at = at
        self._incident_for_notice(env.notice).status_history.append(
            {"status": "Pending", "at": format_ts(at), "attempt": 0, "detail": "requeued by operator"}
        )
        return {"outcome": f"notice {env.notice.notice_id} requeued"}

    # serialization

    def to_dict(self) -> dict:
        return {
            "suspects": {
                "placeholder_counter": self.suspects.placeholder_counter,
                "records": [s.to_dict() for s in self.suspects.list()],
            },
            "galleries": {
                m.value: [e.to_dict() for e in sorted(self.galleries[m], key=lambda e: e.key)] for m in Modality
            },
            "stations": [s.to_dict() for s in self.list_stations()],
            "alarms": self.engine.to_dict(),
            "incidents": [self.incidents[k].to_dict() for k in sorted(self.incidents)],
            "notices": [self.envelopes[n].to_dict() for n in self.notice_order],
            "notice_counter": self.notice_counter,
            "sightings": list(self.sightings),
            "seen": sorted(self.seen),
        }

    def digest(self) -> str:
        return state_digest(self.to_dict())

    @classmethod
    def from_dict(cls, config: HubConfig, d: dict) -> "HubState":
        state = cls(config)
        state.suspects.placeholder_counter = int(d["suspects"]["placeholder_counter"])
        for s in d["suspects"]["records"]:
            state.suspects.put(SuspectRecord.from_dict(s))
        for modality in Modality:
            for e in d["galleries"][modality.value]:
                state.galleries[modality].add(GalleryEntry.from_dict(e))
        for s in d["stations"]:
            station = Station.from_dict(s)
            state.stations[station.station_id] = station
        state.engine.load(d["alarms"])
        for i in d["incidents"]:
            inc = IncidentRecord.from_dict(i)
            state.incidents[inc.incident_id] = inc
        for n in d["notices"]:
            env = NoticeEnvelope.from_dict(n)
            state.envelopes[env.notice.notice_id] = env
            state.notice_order.append(env.notice.notice_id)
        state.notice_counter = int(d["notice_counter"])
        state.sightings = list(d["sightings"])
        state.seen = set(d["seen"])
        return state


def replay_into(state: HubState, records) -> int:
    """Apply logged records in order; returns how many were applied."""
    n = 0
    for record in records:
        try:
            state.apply(record)
        except HubError as exc:
            raise HubError(f"record seq={record.get('seq')} failed to replay: {exc}") from exc
        n += 1
    return n
