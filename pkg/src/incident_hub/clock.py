"""UTC timestamp helpers.

All timestamps inside the hub are timezone-aware UTC datetimes and are
serialized as ISO 8601 with a trailing ``Z``.
"""

from __future__ import annotations

from datetime import datetime, timezone


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def parse_ts(value: str | datetime) -> datetime:
    """Parse an ISO 8601 timestamp; naive values are rejected."""
    if isinstance(value, datetime):
        dt = value
    else:
        text = str(value).strip()
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp {value!r} has no timezone")
    return dt.astimezone(timezone.utc)


def format_ts(dt: datetime) -> str:
    dt = dt.astimezone(timezone.utc)
    return dt.replace(tzinfo=None).isoformat() + "Z"
