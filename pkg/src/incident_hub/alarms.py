"""Silent alarms from weapon detections: confidence gate, per-site debounce, lifecycle.

Lifecycle::

    Triggered -> Dispatched -> Acknowledged -> Resolved
    Triggered -> Resolved          (administrative cancel)

All timestamps come from the detections and commands themselves, never from
the wall clock, so replaying the same inputs reproduces the same alarms.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum

from .clock import format_ts, parse_ts
from .errors import IllegalTransition, MalformedEvent, NotFound, UnknownSite
from .geo import GeoPoint

DEFAULT_CONFIDENCE_GATE = 0.5
DEFAULT_DEBOUNCE_SECONDS = 120.0


class WeaponClass(str, Enum):
    GUN = "Gun"
    KNIFE = "Knife"
    OTHER = "Other"


class AlarmState(str, Enum):
    TRIGGERED = "Triggered"
    DISPATCHED = "Dispatched"
    ACKNOWLEDGED = "Acknowledged"
    RESOLVED = "Resolved"


_EDGES = {
    AlarmState.TRIGGERED: {AlarmState.DISPATCHED, AlarmState.RESOLVED},
    AlarmState.DISPATCHED: {AlarmState.ACKNOWLEDGED},
    AlarmState.ACKNOWLEDGED: {AlarmState.RESOLVED},
    AlarmState.RESOLVED: set(),
}


@dataclass(frozen=True)
class WeaponDetection:
    site_id: str
    weapon_class: WeaponClass
    confidence: float
    observed_at: datetime
    position: GeoPoint
    event_id: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise MalformedEvent(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "site_id": self.site_id,
            "weapon_class": self.weapon_class.value,
            "confidence": self.confidence,
            "observed_at": format_ts(self.observed_at),
            "position": self.position.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WeaponDetection":
        return cls(
            site_id=d["site_id"],
            weapon_class=WeaponClass(d["weapon_class"]),
            confidence=float(d["confidence"]),
            observed_at=parse_ts(d["observed_at"]),
            position=GeoPoint.from_dict(d["position"]),
            event_id=d.get("event_id"),
        )


@dataclass(frozen=True)
class Transition:
    state: AlarmState
    at: datetime
    actor: str

    def to_dict(self) -> dict:
        return {"state": self.state.value, "at": format_ts(self.at), "actor": self.actor}

    @classmethod
    def from_dict(cls, d: dict) -> "Transition":
        return cls(AlarmState(d["state"]), parse_ts(d["at"]), d["actor"])


@dataclass
class Alarm:
    alarm_id: str
    site_id: str
    triggering_detection: WeaponDetection
    state: AlarmState = AlarmState.TRIGGERED
    station_id: str | None = None
    attached: list[WeaponDetection] = field(default_factory=list)
    history: list[Transition] = field(default_factory=list)

    @property
    def last_detection_at(self) -> datetime:
        return max([self.triggering_detection.observed_at] + [d.observed_at for d in self.attached])

    @property
    def is_open(self) -> bool:
        return self.state is not AlarmState.RESOLVED

    def _move(self, target: AlarmState, at: datetime, actor: str) -> None:
        if target not in _EDGES[self.state]:
            raise IllegalTransition(
                f"alarm {self.alarm_id}: {self.state.value} -> {target.value} not allowed"
            )
        self.state = target
        self.history.append(Transition(target, at, actor))

    def dispatch(self, station_id: str, at: datetime, actor: str = "dispatch") -> None:
        if self.station_id is not None:
            raise IllegalTransition(f"alarm {self.alarm_id} already assigned to {self.station_id}")
        self._move(AlarmState.DISPATCHED, at, actor)
        self.station_id = station_id

    def to_dict(self) -> dict:
        return {
            "alarm_id": self.alarm_id,
            "site_id": self.site_id,
            "state": self.state.value,
            "station_id": self.station_id,
            "triggering_detection": self.triggering_detection.to_dict(),
            "attached": [d.to_dict() for d in self.attached],
            "history": [t.to_dict() for t in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Alarm":
        return cls(
            alarm_id=d["alarm_id"],
            site_id=d["site_id"],
            triggering_detection=WeaponDetection.from_dict(d["triggering_detection"]),
            state=AlarmState(d["state"]),
            station_id=d.get("station_id"),
            attached=[WeaponDetection.from_dict(x) for x in d.get("attached", [])],
            history=[Transition.from_dict(x) for x in d.get("history", [])],
        )


@dataclass(frozen=True)
class AlarmAction:
    kind: str  # "TriggeredNew" | "AttachedToActive" | "IgnoredLowConfidence"
    alarm_id: str | None = None


class AlarmEngine:
    """Turns weapon detections into alarms and enforces the alarm lifecycle.

    A detection opens a new alarm unless the site already has an open alarm
    whose most recent detection is within the debounce window, in which case
    it is attached to that alarm. At most one alarm per site absorbs
    detections at any time.
    """

    def __init__(
        self,
        sites: dict[str, str] | set[str] | list[str],
        confidence_gate: float = DEFAULT_CONFIDENCE_GATE,
        debounce_seconds: float = DEFAULT_DEBOUNCE_SECONDS,
    ) -> None:
        self.sites = set(sites)
        self.confidence_gate = confidence_gate
        self.debounce = timedelta(seconds=debounce_seconds)
        self.alarms: dict[str, Alarm] = {}
        self.active: dict[str, str] = {}  # site_id -> alarm absorbing detections
        self.counter = 0
        self._lock = threading.RLock()

    def get(self, alarm_id: str) -> Alarm:
        try:
            return self.alarms[alarm_id]
        except KeyError:
            raise NotFound(f"alarm {alarm_id!r} not found") from None

    def ingest_weapon_event(self, d: WeaponDetection, now: datetime | None = None) -> AlarmAction:
        if d.site_id not in self.sites:
            raise UnknownSite(f"unknown site {d.site_id!r}")
        now = now or d.observed_at
        if d.confidence <= self.confidence_gate:
            return AlarmAction("IgnoredLowConfidence")
        with self._lock:
            current = self.alarms.get(self.active.get(d.site_id, ""))
            if (
                current is not None
                and current.is_open
                and abs(d.observed_at - current.last_detection_at) <= self.debounce
            ):
                current.attached.append(d)
                return AlarmAction("AttachedToActive", current.alarm_id)
            self.counter += 1
            alarm = Alarm(
                alarm_id=f"ALM-{self.counter:06d}",
                site_id=d.site_id,
                triggering_detection=d,
                history=[Transition(AlarmState.TRIGGERED, now, "system")],
            )
            self.alarms[alarm.alarm_id] = alarm
            self.active[d.site_id] = alarm.alarm_id
            return AlarmAction("TriggeredNew", alarm.alarm_id)

    def check(self, alarm_id: str, target: AlarmState) -> Alarm:
        """Raise unless ``alarm_id`` may move to ``target`` right now."""
        alarm = self.get(alarm_id)
        if target not in _EDGES[alarm.state]:
            raise IllegalTransition(
                f"alarm {alarm_id}: {alarm.state.value} -> {target.value} not allowed"
            )
        return alarm

    def acknowledge(self, alarm_id: str, officer_id: str, now: datetime) -> Alarm:
        with self._lock:
            alarm = self.check(alarm_id, AlarmState.ACKNOWLEDGED)
            alarm._move(AlarmState.ACKNOWLEDGED, now, officer_id)
            return alarm

    def resolve(self, alarm_id: str, actor: str, now: datetime) -> Alarm:
        with self._lock:
            alarm = self.check(alarm_id, AlarmState.RESOLVED)
            alarm._move(AlarmState.RESOLVED, now, actor)
            if self.active.get(alarm.site_id) == alarm_id:
                del self.active[alarm.site_id]
            return alarm

    def to_dict(self) -> dict:
        return {
            "counter": self.counter,
            "active": dict(sorted(self.active.items())),
            "alarms": [self.alarms[k].to_dict() for k in sorted(self.alarms)],
        }

    def load(self, d: dict) -> None:
        self.counter = int(d["counter"])
        self.active = dict(d["active"])
        self.alarms = {a["alarm_id"]: Alarm.from_dict(a) for a in d["alarms"]}
