"""Detection event wire schema and validation.

One JSON object per event::

    {"event_id": "cam1-000017", "site_id": "SITE-A", "kind": "WeaponDetection",
     "observed_at": "2024-01-15T09:30:00Z", "position": {"lat": 6.9271, "lon": 79.8612},
     "weapon_class": "Gun", "confidence": 0.91}

``FaceSighting`` and ``FingerprintQuery`` carry ``embedding`` (raw floats,
normalized by the hub) instead of ``weapon_class``/``confidence``; a
fingerprint query may name an existing ``suspect_hint``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime
from enum import Enum

import numpy as np

from .alarms import WeaponClass, WeaponDetection
from .clock import format_ts, parse_ts
from .errors import HubError, MalformedEvent, PayloadTooLarge
from .geo import GeoPoint
from .identity import normalize

DEFAULT_MAX_EMBEDDING_BYTES = 64 * 1024


class EventKind(str, Enum):
    FACE_SIGHTING = "FaceSighting"
    FINGERPRINT_QUERY = "FingerprintQuery"
    WEAPON_DETECTION = "WeaponDetection"


_COMMON = {"event_id", "site_id", "kind", "observed_at", "position"}
_ALLOWED = {
    EventKind.FACE_SIGHTING: _COMMON | {"embedding"},
    EventKind.FINGERPRINT_QUERY: _COMMON | {"embedding", "suspect_hint"},
    EventKind.WEAPON_DETECTION: _COMMON | {"weapon_class", "confidence"},
}


@dataclass(frozen=True)
class DetectionEvent:
    event_id: str
    site_id: str
    kind: EventKind
    observed_at: datetime
    position: GeoPoint
    embedding: tuple[float, ...] | None = None
    weapon_class: WeaponClass | None = None
    confidence: float | None = None
    suspect_hint: str | None = None

    @property
    def dedup_key(self) -> str:
        return f"{self.site_id}/{self.event_id}"

    def normalized_embedding(self) -> np.ndarray:
        return normalize(self.embedding)

    def weapon_detection(self) -> WeaponDetection:
        return WeaponDetection(
            site_id=self.site_id,
            weapon_class=self.weapon_class,
            confidence=self.confidence,
            observed_at=self.observed_at,
            position=self.position,
            event_id=self.event_id,
        )

    def to_dict(self) -> dict:
        d = {
            "event_id": self.event_id,
            "site_id": self.site_id,
            "kind": self.kind.value,
            "observed_at": format_ts(self.observed_at),
            "position": self.position.to_dict(),
        }
        if self.kind is EventKind.WEAPON_DETECTION:
            d["weapon_class"] = self.weapon_class.value
            d["confidence"] = self.confidence
        else:
            d["embedding"] = list(self.embedding)
            if self.suspect_hint is not None:
                d["suspect_hint"] = self.suspect_hint
        return d


def parse_event(
    data: dict | str | bytes,
    dims: int | None = None,
    max_embedding_bytes: int = DEFAULT_MAX_EMBEDDING_BYTES,
) -> DetectionEvent:
    """Validate a wire event; any problem raises ``MalformedEvent``."""
    if isinstance(data, (bytes, str)):
        raw = data.encode("utf-8") if isinstance(data, str) else data
        if len(raw) > max_embedding_bytes:
            raise PayloadTooLarge(f"event payload of {len(raw)} bytes exceeds {max_embedding_bytes}")
        try:
            data = json.loads(raw)
        except ValueError as exc:
            raise MalformedEvent(f"event is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise MalformedEvent("event must be a JSON object")
    try:
        kind = EventKind(data.get("kind"))
    except ValueError:
        raise MalformedEvent(f"unknown event kind {data.get('kind')!r}") from None
    missing = _COMMON - set(data)
    if missing:
        raise MalformedEvent(f"missing fields: {sorted(missing)}")
    extra = set(data) - _ALLOWED[kind]
    if extra:
        raise MalformedEvent(f"unexpected fields for {kind.value}: {sorted(extra)}")
    try:
        event_id, site_id = data["event_id"], data["site_id"]
        if not isinstance(event_id, str) or not event_id or not isinstance(site_id, str) or not site_id:
            raise MalformedEvent("event_id and site_id must be non-empty strings")
        observed_at = parse_ts(data["observed_at"])
        pos = data["position"]
        position = GeoPoint(float(pos["lat"]), float(pos["lon"]))
        if kind is EventKind.WEAPON_DETECTION:
            confidence = float(data["confidence"])
            if not (math.isfinite(confidence) and 0.0 <= confidence <= 1.0):
                raise MalformedEvent(f"confidence {confidence} outside [0, 1]")
            return DetectionEvent(
                event_id, site_id, kind, observed_at, position,
                weapon_class=WeaponClass(data["weapon_class"]), confidence=confidence,
            )
        if max_embedding_bytes and len(json.dumps(data)) > max_embedding_bytes:
            raise PayloadTooLarge(f"embedding message exceeds {max_embedding_bytes} bytes")
        embedding = tuple(float(x) for x in data["embedding"])
        normalize(embedding, dims)  # rejects zero / wrong-size / non-finite vectors
        hint = data.get("suspect_hint")
        return DetectionEvent(
            event_id, site_id, kind, observed_at, position,
            embedding=embedding, suspect_hint=None if hint is None else str(hint),
        )
    except MalformedEvent:
        raise
    except (HubError, KeyError, TypeError, ValueError) as exc:
        raise MalformedEvent(f"invalid {kind.value} event: {exc}") from exc
