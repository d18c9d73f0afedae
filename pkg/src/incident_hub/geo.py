"""Great-circle distance, nearest-station lookup and notice composition."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import IllegalTransition, InvalidPosition, NoStations

if TYPE_CHECKING:
    from .alarms import Alarm

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        lat, lon = float(self.lat), float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise InvalidPosition(f"non-finite coordinates ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise InvalidPosition(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(lon))

    def to_dict(self) -> dict:
        return {"lat": self.lat, "lon": self.lon}

    @classmethod
    def from_dict(cls, d: dict) -> "GeoPoint":
        return cls(d["lat"], d["lon"])


def normalize_lon(lon: float) -> float:
    """Wrap a longitude into (-180, 180]."""
    if -180.0 < lon <= 180.0:
        return lon
    wrapped = math.fmod(lon + 180.0, 360.0)
    if wrapped <= 0.0:
        wrapped += 360.0
    return wrapped - 180.0


def haversine_km(p: GeoPoint, q: GeoPoint) -> float:
    # abs() keeps the result bit-identical under argument swap
    dlat = math.radians(abs(q.lat - p.lat))
    dlon = math.radians(abs(q.lon - p.lon))
    h = math.sin(dlat / 2) ** 2 + math.cos(math.radians(p.lat)) * math.cos(math.radians(q.lat)) * math.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class Station:
    station_id: str
    label: str
    position: GeoPoint
    delivery_endpoint: str = "console:"

    def to_dict(self) -> dict:
        return {
            "station_id": self.station_id,
            "label": self.label,
            "position": self.position.to_dict(),
            "delivery_endpoint": self.delivery_endpoint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Station":
        return cls(
            station_id=str(d["station_id"]),
            label=str(d["label"]),
            position=GeoPoint.from_dict(d["position"]),
            delivery_endpoint=str(d.get("delivery_endpoint") or "console:"),
        )


def nearest_station(pos: GeoPoint, stations: Sequence[Station]) -> Station:
    """Closest station by great-circle distance; equal distances go to the smallest id."""
    if not stations:
        raise NoStations("no stations registered")
    return min(stations, key=lambda s: (haversine_km(pos, s.position), s.station_id))


def read_station_file(lines: Iterable[str]) -> list[Station]:
    """Parse ``station_id,label,lat,lon,endpoint`` lines; blank and ``#`` lines are skipped."""
    stations = []
    rows = csv.reader(line for line in lines if line.strip() and not line.lstrip().startswith("#"))
    for row in rows:
        station_id, label, lat, lon = (c.strip() for c in row[:4])
        endpoint = row[4].strip() if len(row) > 4 and row[4].strip() else "console:"
        stations.append(Station(station_id, label, GeoPoint(float(lat), float(lon)), endpoint))
    return stations


class DeliveryStatus(str, Enum):
    PENDING = "Pending"
    DELIVERED = "Delivered"
    FAILED = "Failed"


_NOTICE_EDGES = {
    DeliveryStatus.PENDING: {DeliveryStatus.DELIVERED, DeliveryStatus.FAILED},
    DeliveryStatus.FAILED: {DeliveryStatus.PENDING},
    DeliveryStatus.DELIVERED: set(),
}


@dataclass
class Notice:
    notice_id: str
    alarm_id: str
    station_id: str
    date: str
    time: str
    position: GeoPoint
    site_label: str
    weapon_class: str
    status: DeliveryStatus = DeliveryStatus.PENDING

    def set_status(self, status: DeliveryStatus) -> None:
        if status not in _NOTICE_EDGES[self.status]:
            raise IllegalTransition(f"notice {self.notice_id}: {self.status.value} -> {status.value}")
        self.status = status

    def to_dict(self) -> dict:
        return {
            "notice_id": self.notice_id,
            "alarm_id": self.alarm_id,
            "station_id": self.station_id,
            "date": self.date,
            "time": self.time,
            "position": self.position.to_dict(),
            "site_label": self.site_label,
            "weapon_class": self.weapon_class,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Notice":
        return cls(
            notice_id=d["notice_id"],
            alarm_id=d["alarm_id"],
            station_id=d["station_id"],
            date=d["date"],
            time=d["time"],
            position=GeoPoint.from_dict(d["position"]),
            site_label=d["site_label"],
            weapon_class=d["weapon_class"],
            status=DeliveryStatus(d["status"]),
        )


def compose_notice(
    alarm: "Alarm",
    station: Station,
    notice_id: str,
    site_label: str,
    now: datetime | None = None,
) -> Notice:
    """Build the dispatch notice and move the alarm to Dispatched.

    Date, time and position all come from the alarm's triggering detection;
    ``now`` only stamps the alarm's Dispatched transition (defaults to the
    detection time).
    """
    from .alarms import AlarmState

    if alarm.state is not AlarmState.TRIGGERED:
        raise IllegalTransition(f"alarm {alarm.alarm_id} is {alarm.state.value}, not Triggered")
    det = alarm.triggering_detection
    observed = det.observed_at
    notice = Notice(
        notice_id=notice_id,
        alarm_id=alarm.alarm_id,
        station_id=station.station_id,
        date=observed.date().isoformat(),
        time=observed.time().isoformat(),
        position=det.position,
        site_label=site_label,
        weapon_class=det.weapon_class.value,
    )
    alarm.dispatch(station.station_id, now or observed, actor="dispatch")
    return notice
