"""The hub: ingestion, orchestration, notice delivery and subscriptions.

Every state change is first appended to the record log and only then
applied, all under one ingestion lock, so an acknowledged event survives a
crash and a replay reproduces the same ids in the same order. Notice
delivery runs outside that lock; its outcomes are logged like any other
record.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx

from .clock import format_ts, utcnow
from .config import ALL_STATIONS, HubConfig
from .errors import (
    AuthFailure,
    DeliveryError,
    NotFound,
    PayloadTooLarge,
    UnknownSite,
    UnknownStation,
)
from .events import DetectionEvent, parse_event
from .geo import DeliveryStatus, Station, read_station_file
from .identity import MatchResult, Modality, SuspectRecord, match, normalize
from .persistence import EventLog, read_snapshot, write_snapshot
from .state import HubState, replay_into
from .summarizer import Summary, load_stopwords, summarize

logger = logging.getLogger(__name__)

LOG_NAME = "events.log"
SNAPSHOT_NAME = "snapshot.json"

Transport = Callable[[str, dict], None]


def default_transport(endpoint: str, payload: dict) -> None:
    """Push one notice envelope to a station endpoint.

    ``console:`` and ``null:`` endpoints rely on the subscription stream alone
    and always succeed; ``http(s)://`` endpoints receive a JSON POST.
    """
    if endpoint in ("", "console:", "null:"):
        return
    if endpoint.startswith(("http://", "https://")):
        try:
            resp = httpx.post(endpoint, json=payload, timeout=5.0)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise DeliveryError(str(exc)) from exc
        return
    raise DeliveryError(f"unsupported delivery endpoint {endpoint!r}")


@dataclass
class Ack:
    accepted: bool
    dedup: bool
    outcome: str
    sequence: int | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "dedup": self.dedup,
            "outcome": self.outcome,
            "sequence": self.sequence,
            "details": self.details,
        }


@dataclass
class RecoveryReport:
    snapshot_seq: int = 0
    replayed: int = 0
    last_seq: int = 0
    truncated_bytes: int = 0
    digest: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Subscription:
    """Cursor into the hub's dispatch-ordered notice sequence."""

    def __init__(self, hub: "Hub", station_id: str | None, cursor: int) -> None:
        self.hub = hub
        self.station_id = station_id
        self.cursor = cursor
        self.last_seen: str | None = None

    def poll(self) -> list[dict]:
        with self.hub._lock:
            return self._take()

    def wait(self, timeout: float | None = None) -> list[dict]:
        """Block until at least one notice in scope arrives or ``timeout`` expires."""
        with self.hub._cv:
            out = self._take()
            if out:
                return out
            self.hub._cv.wait_for(lambda: len(self.hub.state.notice_order) > self.cursor, timeout)
            return self._take()

    def _take(self) -> list[dict]:
        state = self.hub.state
        ids = state.notice_order[self.cursor:]
        self.cursor = len(state.notice_order)
        out = []
        for nid in ids:
            env = state.envelopes[nid]
            if self.station_id is None or env.notice.station_id == self.station_id:
                out.append(env.to_dict())
                self.last_seen = nid
        return out


class Hub:
    def __init__(
        self,
        config: HubConfig | None = None,
        data_dir: str | Path | None = None,
        transport: Transport | None = None,
    ) -> None:
        self.config = config or HubConfig()
        self.data_dir = Path(data_dir) if data_dir is not None else self.config.data_dir
        self.transport = transport or default_transport
        self.state = HubState(self.config)
        self._lock = threading.RLock()
        self._cv = threading.Condition(self._lock)
        self._delivery_lock = threading.Lock()
        self._log: EventLog | None = None
        self._mem_seq = 0
        self._stop = threading.Event()
        self._scheduler: threading.Thread | None = None
        self.recovery = RecoveryReport()
        self._stopwords = load_stopwords(self.config.stopwords_file)
        if self.data_dir is not None:
            self._recover()

    # lifecycle

    @classmethod
    def recover(cls, config: HubConfig, data_dir: str | Path, transport: Transport | None = None) -> "Hub":
        """Rebuild a hub from ``data_dir``: latest valid snapshot plus the log tail."""
        return cls(config, data_dir, transport)

    def _recover(self) -> None:
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._log = EventLog(self.data_dir / LOG_NAME, fsync=self.config.fsync)
        records = self._log.recovered
        report = RecoveryReport(truncated_bytes=self._log.truncated_bytes, last_seq=self._log.last_seq)
        snap = read_snapshot(self.data_dir / SNAPSHOT_NAME)
        if snap is not None and snap[0] <= len(records):
            report.snapshot_seq = snap[0]
            self.state = HubState.from_dict(self.config, snap[1])
        elif snap is not None:
            logger.warning("snapshot at seq %d is ahead of the log (%d records); replaying from scratch", snap[0], len(records))
        report.replayed = replay_into(self.state, records[report.snapshot_seq:])
        report.digest = self.state.digest()
        self.recovery = report
        self._log.recovered = []

    def snapshot(self) -> str:
        """Write a snapshot of the current state; returns its digest."""
        if self.data_dir is None:
            raise ValueError("in-memory hub has no data directory")
        with self._lock:
            return write_snapshot(self.data_dir / SNAPSHOT_NAME, self._log.last_seq, self.state.to_dict())

    def close(self) -> None:
        self.stop_delivery_loop()
        if self._log is not None:
            self._log.close()

    def __enter__(self) -> "Hub":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def last_seq(self) -> int:
        return self._log.last_seq if self._log is not None else self._mem_seq

    def digest(self) -> str:
        with self._lock:
            return self.state.digest()

    def _execute(self, record: dict) -> tuple[int, dict]:
        with self._lock:
            self.state.validate(record)
            if self._log is not None:
                seq = self._log.append(record)
            else:
                self._mem_seq += 1
                seq = self._mem_seq
            before = len(self.state.notice_order)
            result = self.state.apply(record)
            if len(self.state.notice_order) != before:
                self._cv.notify_all()
            return seq, result

    # ingestion

    def submit_event(self, event: DetectionEvent | dict | str | bytes) -> Ack:
        """Validate, log and process one detector event.

        The event is durable before this returns. A repeated ``event_id``
        for the same site is acknowledged with ``dedup=True`` and changes
        nothing.
        """
        if not isinstance(event, DetectionEvent):
            event = parse_event(event, self.config.dims, self.config.max_embedding_bytes)
        elif event.embedding is not None:
            normalize(event.embedding, self.config.dims)
        if event.site_id not in self.config.sites:
            raise UnknownSite(f"unknown site {event.site_id!r}")
        with self._lock:
            if self.state.is_duplicate(event):
                return Ack(True, True, f"duplicate event {event.event_id}; already processed")
            seq, result = self._execute({"type": "event", "event": event.to_dict()})
        return Ack(True, False, result["outcome"], seq, result)

    def append_event(self, event: DetectionEvent) -> int:
        return self.submit_event(event).sequence

    # registries

    def put_suspect(
        self,
        suspect: SuspectRecord | dict,
        face: Sequence[Sequence[float]] = (),
        fingerprint: Sequence[Sequence[float]] = (),
        now: datetime | None = None,
    ) -> dict:
        # Without an explicit time, enrollment is stamped with the record's
        # created_at so that loading the same suspects twice yields the same state.
        if isinstance(suspect, dict):
            suspect = SuspectRecord.from_dict({"created_at": format_ts(now or utcnow()), **suspect})
        now = now or suspect.created_at
        record = {
            "type": "suspect_put",
            "suspect": suspect.to_dict(),
            "face": [[float(x) for x in v] for v in face],
            "fingerprint": [[float(x) for x in v] for v in fingerprint],
            "at": format_ts(now),
        }
        return self._execute(record)[1]

    def get_suspect(self, suspect_id: str) -> SuspectRecord:
        with self._lock:
            return self.state.get_suspect(suspect_id)

    def list_suspects(self) -> list[SuspectRecord]:
        with self._lock:
            return self.state.list_suspects()

    def import_gallery(self, lines: Iterable[str], now: datetime | None = None) -> dict:
        import csv

        at = format_ts(now or utcnow())
        entries = []
        for row in csv.reader(line for line in lines if line.strip()):
            entries.append({
                "key": row[0].strip(),
                "suspect_id": row[1].strip(),
                "modality": row[2].strip(),
                "embedding": [float(x) for x in row[3:]],
                "enrolled_at": at,
            })
        return self._execute({"type": "gallery_put", "entries": entries, "at": at})[1]

    def export_gallery(self, modality: Modality | str) -> list[str]:
        with self._lock:
            return self.state.galleries[Modality(modality)].export_lines()

    def put_station(self, station: Station | dict, now: datetime | None = None) -> dict:
        if isinstance(station, dict):
            station = Station.from_dict(station)
        return self._execute({"type": "station_put", "station": station.to_dict(), "at": format_ts(now or utcnow())})[1]

    def load_station_file(self, path: str | Path, now: datetime | None = None) -> int:
        """Register stations from a registry file, skipping ids already known."""
        added = 0
        for station in read_station_file(Path(path).read_text(encoding="utf-8").splitlines()):
            if station.station_id not in self.state.stations:
                self.put_station(station, now)
                added += 1
        return added

    def list_stations(self) -> list[Station]:
        with self._lock:
            return self.state.list_stations()

    # incidents and alarms

    def get_incident(self, incident_id: str) -> dict:
        with self._lock:
            return self.state.incident_view(incident_id)

    def list_incidents(self, site_id: str | None = None, state: str | None = None) -> list[dict]:
        with self._lock:
            return [self.state.incident_view(i.incident_id) for i in self.state.list_incidents(site_id, state)]

    def attach_report(self, incident_id: str, text: str, now: datetime | None = None) -> dict:
        self._check_report_size(text)
        return self._execute({"type": "report_put", "incident_id": incident_id, "text": text, "at": format_ts(now or utcnow())})[1]

    def _check_report_size(self, text: str) -> None:
        size = len(text.encode("utf-8"))
        if size > self.config.max_report_bytes:
            raise PayloadTooLarge(f"report of {size} bytes exceeds {self.config.max_report_bytes}")

    def summarize_report(
        self,
        incident_id: str | None = None,
        text: str | None = None,
        ratio: float | None = None,
        k: int | None = None,
    ) -> Summary:
        if (incident_id is None) == (text is None):
            raise ValueError("give exactly one of incident_id or text")
        if text is not None:
            self._check_report_size(text)
            return summarize(text, ratio, k, self._stopwords)
        with self._lock:
            incident = self.state.get_incident(incident_id)
            if incident.report is None:
                raise NotFound(f"incident {incident_id} has no report")
            report = incident.report
        summary = summarize(report, ratio, k, self._stopwords)
        with self._lock:
            if incident.report == report:
                incident.summary = summary.to_dict()
        return summary

    def acknowledge_alarm(self, alarm_id: str, officer_id: str, now: datetime | None = None) -> dict:
        record = {"type": "ack", "alarm_id": alarm_id, "officer_id": officer_id, "at": format_ts(now or utcnow())}
        return self._execute(record)[1]["alarm"]

    def resolve_alarm(self, alarm_id: str, actor: str, now: datetime | None = None) -> dict:
        record = {"type": "resolve", "alarm_id": alarm_id, "actor": actor, "at": format_ts(now or utcnow())}
        return self._execute(record)[1]["alarm"]

    def identify(self, modality: Modality | str, probe: Sequence[float]) -> MatchResult:
        """Read-only identification against one gallery (no enrollment)."""
        modality = Modality(modality)
        threshold = self.config.face_threshold if modality is Modality.FACE else self.config.fingerprint_threshold
        vec = normalize(probe, self.config.dims)
        with self._lock:
            gallery = self.state.galleries[modality]
        return match(vec, gallery, threshold)

    # notices

    def authorize(self, token: str | None, station_id: str | None) -> None:
        """Check a bearer token against the requested scope (``None`` = all stations)."""
        if not self.config.auth_enabled:
            return
        scope = self.config.tokens.get(token or "")
        if scope is None:
            raise AuthFailure("invalid or missing bearer token")
        if scope != ALL_STATIONS and scope != station_id:
            raise AuthFailure(f"token not valid for scope {station_id or ALL_STATIONS!r}")

    def subscribe(self, station_id: str | None = None, last_seen: str | None = None) -> Subscription:
        """Open a notice subscription from now on, or resume after ``last_seen``."""
        with self._lock:
            if station_id is not None and station_id not in self.state.stations:
                raise UnknownStation(f"unknown station {station_id!r}")
            if last_seen:
                try:
                    cursor = self.state.notice_order.index(last_seen) + 1
                except ValueError:
                    raise NotFound(f"notice {last_seen!r} not found") from None
            else:
                cursor = len(self.state.notice_order)
            return Subscription(self, station_id, cursor)

    def notices_after(self, last_seen: str | None = None, station_id: str | None = None) -> list[dict]:
        with self._lock:
            sub = self.subscribe(station_id, last_seen)
            if not last_seen:
                sub.cursor = 0
            return sub.poll()

    def deliver_notices(self, now: datetime | None = None) -> list[dict]:
        """Push every due pending notice once; failures are rescheduled with backoff."""
        now = now or utcnow()
        report = []
        with self._delivery_lock:
            with self._lock:
                due = []
                for nid in self.state.notice_order:
                    env = self.state.envelopes[nid]
                    if env.notice.status is DeliveryStatus.PENDING and env.next_retry_at <= now:
                        payload = env.to_dict()
                        payload["attempt_count"] = env.attempt_count + 1
                        endpoint = self.state.stations[env.notice.station_id].delivery_endpoint
                        due.append((nid, env.attempt_count + 1, endpoint, payload))
            for nid, attempt, endpoint, payload in due:
                try:
                    self.transport(endpoint, payload)
                    ok, error = True, None
                except Exception as exc:  # a broken endpoint must never take the hub down
                    ok, error = False, str(exc) or type(exc).__name__
                    logger.warning("delivery of %s to %s failed (attempt %d): %s", nid, endpoint, attempt, error)
                record = {"type": "delivery", "notice_id": nid, "attempt": attempt, "ok": ok, "error": error, "at": format_ts(now)}
                _, result = self._execute(record)
                report.append({"notice_id": nid, **result})
        return report

    def retry_notice(self, notice_id: str, now: datetime | None = None) -> dict:
        return self._execute({"type": "notice_retry", "notice_id": notice_id, "at": format_ts(now or utcnow())})[1]

    def start_delivery_loop(self, interval: float = 0.5) -> None:
        if self._scheduler is not None:
            return
        self._stop.clear()

        def loop() -> None:
            while not self._stop.wait(interval):
                try:
                    self.deliver_notices()
                except Exception:
                    logger.exception("delivery loop iteration failed")

        self._scheduler = threading.Thread(target=loop, name="notice-delivery", daemon=True)
        self._scheduler.start()

    def stop_delivery_loop(self) -> None:
        if self._scheduler is not None:
            self._stop.set()
            self._scheduler.join(timeout=5)
            self._scheduler = None
