"""Synthetic detectors: seeded identities, noisy probes and fixture replay.

Stands in for the face/fingerprint feature extractors and the weapon
detector. Every identity draws from its own seeded generator, so adding
identities never perturbs existing ones.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator, Protocol

import numpy as np

from .clock import format_ts, parse_ts
from .errors import ConnectionLost, ParseError, StorageUnavailable
from .identity import DEFAULT_DIMS, normalize

logger = logging.getLogger(__name__)

PROBE_STREAM = 0x5EED


@dataclass(frozen=True)
class SyntheticIdentity:
    seed: int
    embedding: np.ndarray
    sigma: float = 0.0

    @property
    def dims(self) -> int:
        return self.embedding.shape[0]


def gen_identity(seed: int, dims: int = DEFAULT_DIMS, sigma: float = 0.0) -> SyntheticIdentity:
    """A point drawn uniformly from the unit sphere, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    return SyntheticIdentity(seed, normalize(rng.standard_normal(dims)), sigma)


def gen_probe(identity: SyntheticIdentity, sigma: float | None = None, probe_seed: int = 0) -> np.ndarray:
    """The identity's embedding plus isotropic Gaussian noise, renormalized.

    ``sigma`` is the expected norm of the noise vector (per-component standard
    deviation ``sigma / sqrt(dims)``), so the expected cosine to the base is
    roughly ``1 / sqrt(1 + sigma**2)`` regardless of dimensionality.
    """
    sigma = identity.sigma if sigma is None else sigma
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return identity.embedding
    rng = np.random.default_rng([identity.seed, PROBE_STREAM, probe_seed])
    noise = rng.standard_normal(identity.dims) * (sigma / math.sqrt(identity.dims))
    return normalize(identity.embedding + noise)


# fixtures


def read_fixture(lines: Iterable[str]) -> list[dict]:
    """Parse a JSON-lines event fixture. Blank lines and ``#`` comments are skipped."""
    events = []
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        try:
            obj = json.loads(text)
        except ValueError as exc:
            raise ParseError(f"invalid JSON: {exc}", lineno) from None
        if not isinstance(obj, dict):
            raise ParseError("event must be a JSON object", lineno)
        obj["_line"] = lineno
        events.append(obj)
    return events


def write_fixture(path: str | Path, events: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in events:
            f.write(json.dumps(e, separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class FixtureSite:
    site_id: str
    label: str
    lat: float
    lon: float


# Colombo-area deployment used by the canonical fixture
CANONICAL_SITES = (
    FixtureSite("SITE-BANK", "Bank of Ceylon, Fort", 6.9344, 79.8428),
    FixtureSite("SITE-MALL", "Majestic City, Bambalapitiya", 6.8939, 79.8553),
    FixtureSite("SITE-MALABE", "Malabe Junction", 6.9061, 79.9696),
)

CANONICAL_STATIONS = (
    ("STN-01", "Fort Police", 6.9355, 79.8487),
    ("STN-02", "Pettah Police", 6.9395, 79.8530),
    ("STN-03", "Kollupitiya Police", 6.9119, 79.8499),
    ("STN-04", "Bambalapitiya Police", 6.8895, 79.8565),
    ("STN-05", "Wellawatte Police", 6.8747, 79.8612),
    ("STN-06", "Borella Police", 6.9147, 79.8778),
    ("STN-07", "Maradana Police", 6.9286, 79.8650),
    ("STN-08", "Welikada Police", 6.9050, 79.8920),
    ("STN-09", "Malabe Police", 6.9040, 79.9580),
    ("STN-10", "Kaduwela Police", 6.9330, 79.9840),
)


def canonical_config_dict() -> dict:
    return {
        "identity": {"dims": 128, "face_threshold": 0.8, "fingerprint_threshold": 0.8},
        "alarm": {"confidence_gate": 0.5, "debounce_seconds": 120},
        "delivery": {"base_seconds": 2, "factor": 2, "max_attempts": 5},
        "sites": {s.site_id: {"label": s.label} for s in CANONICAL_SITES},
    }


def canonical_station_lines() -> list[str]:
    return [f"{sid},{label},{lat},{lon},console:" for sid, label, lat, lon in CANONICAL_STATIONS]


@dataclass
class FixturePlan:
    """The canonical fixture plus the facts its construction guarantees."""

    events: list[dict]
    bursts: list[tuple[str, int]] = field(default_factory=list)  # (site_id, high-confidence count)
    expected_alarms: int = 0
    enrolled_faces: list[int] = field(default_factory=list)  # identity seeds preloaded as suspects


def build_canonical_fixture(n_events: int = 500, seed: int = 7, dims: int = DEFAULT_DIMS) -> FixturePlan:
    """Mixed face / fingerprint / weapon events across the canonical sites.

    Weapon detections come in bursts per site. Inside a burst consecutive
    detections are 5-20 s apart, so even with low-confidence decoys in between
    any two high-confidence detections of a burst are at most 100 s apart;
    bursts at the same site are separated by at least 15 minutes. Each burst
    opens with a high-confidence detection, so with a 0.5 gate and a 120 s
    debounce every burst raises exactly one alarm; low-confidence (<= 0.5)
    decoys are sprinkled in and raise nothing.
    One event is a verbatim duplicate of an earlier one.
    """
    rng = np.random.default_rng(seed)
    start = datetime(2024, 1, 15, 8, 0, 0, tzinfo=timezone.utc)
    face_ids = [gen_identity(1000 + i, dims) for i in range(20)]
    print_ids = [gen_identity(5000 + i, dims) for i in range(30)]
    per_site = n_events // len(CANONICAL_SITES)
    counts = [per_site] * len(CANONICAL_SITES)
    counts[0] += n_events - 1 - sum(counts)  # one slot left for the duplicate

    plan = FixturePlan(events=[], enrolled_faces=[fid.seed for fid in face_ids[:10]])
    timeline: list[tuple[datetime, int, dict]] = []
    seq = 0
    for site, count in zip(CANONICAL_SITES, counts):
        t = start + timedelta(seconds=int(rng.integers(0, 300)))
        made = 0
        burst_due = int(rng.integers(5, 15))
        while made < count:
            seq += 1
            ev = {
                "event_id": f"{site.site_id}-{made + 1:04d}",
                "site_id": site.site_id,
                "observed_at": None,
                "position": {"lat": site.lat, "lon": site.lon},
            }
            if burst_due == 0 and count - made >= 2:
                # weapon burst: 1 opener + up to 5 follow-ups, each within the debounce window
                size = min(int(rng.integers(2, 7)), count - made)
                high = 0
                for j in range(size):
                    if j > 0:
                        t += timedelta(seconds=int(rng.integers(5, 21)))
                        ev = dict(ev, event_id=f"{site.site_id}-{made + 1:04d}")
                    conf = float(rng.uniform(0.55, 0.99)) if j == 0 or rng.random() < 0.7 else float(rng.uniform(0.05, 0.5))
                    high += conf > 0.5
                    ev.update(
                        kind="WeaponDetection",
                        weapon_class=str(rng.choice(["Gun", "Gun", "Knife", "Other"])),
                        confidence=round(conf, 3),
                        observed_at=format_ts(t),
                    )
                    timeline.append((t, seq, ev))
                    seq += 1
                    made += 1
                plan.bursts.append((site.site_id, high))
                t += timedelta(minutes=15 + int(rng.integers(0, 10)))
                burst_due = int(rng.integers(8, 20))
                continue
            burst_due -= 1
            t += timedelta(seconds=int(rng.integers(30, 240)))
            ev["observed_at"] = format_ts(t)
            roll = rng.random()
            if roll < 0.12:
                # low-confidence decoy outside any burst
                ev.update(kind="WeaponDetection", weapon_class="Other", confidence=round(float(rng.uniform(0.05, 0.5)), 3))
            elif roll < 0.56:
                who = face_ids[int(rng.integers(0, len(face_ids)))]
                probe = gen_probe(who, 0.15 if rng.random() < 0.8 else 2.0, probe_seed=seq)
                ev.update(kind="FaceSighting", embedding=[float(x) for x in probe])
            else:
                who = print_ids[int(rng.integers(0, len(print_ids)))]
                probe = gen_probe(who, 0.1, probe_seed=seq)
                ev.update(kind="FingerprintQuery", embedding=[float(x) for x in probe])
            timeline.append((t, seq, ev))
            made += 1

    timeline.sort(key=lambda item: (item[0], item[1]))
    events = [ev for _, _, ev in timeline]
    dup_at = len(events) // 2
    events.insert(dup_at + 1, dict(events[dup_at]))
    plan.events = events
    plan.expected_alarms = len(plan.bursts)
    return plan


def canonical_suspects(plan: FixturePlan, dims: int = DEFAULT_DIMS) -> list[dict]:
    """Suspect records (with face embeddings) preloaded before replaying the fixture."""
    out = []
    for i, seed in enumerate(plan.enrolled_faces):
        ident = gen_identity(seed, dims)
        out.append({
            "suspect": {"suspect_id": f"S-{i + 1:04d}", "name": f"Suspect {i + 1}", "age": 20 + i,
                        "national_id": f"{198000000 + seed}V", "created_at": "2024-01-01T00:00:00Z"},
            "face": [[float(x) for x in ident.embedding]],
        })
    return out


# replay


class EventSink(Protocol):
    def submit_event(self, event): ...


@dataclass
class ReplayItem:
    line: int
    event_id: str
    site_id: str
    accepted: bool
    dedup: bool
    outcome: str

    def to_line(self) -> str:
        return f"{self.line}\t{self.site_id}\t{self.event_id}\taccepted={str(self.accepted).lower()}\tdedup={str(self.dedup).lower()}\t{self.outcome}"


@dataclass
class ReplayReport:
    items: list[ReplayItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def dedup_count(self) -> int:
        return sum(i.dedup for i in self.items)

    def lines(self) -> list[str]:
        return [i.to_line() for i in self.items]


def _gaps(events: list[dict]) -> Iterator[float]:
    prev = None
    for e in events:
        try:
            t = parse_ts(e.get("observed_at"))
        except (TypeError, ValueError):
            t = None
        yield 0.0 if prev is None or t is None else max(0.0, (t - prev).total_seconds())
        prev = t or prev


def replay(
    events: list[dict] | str | Path,
    sink: EventSink,
    speed: float = math.inf,
    retries: int = 5,
    retry_delay: float = 0.2,
    start_after: int = 0,
    on_ack=None,
) -> ReplayReport:
    """Submit fixture events in file order to ``sink`` (a Hub or HubClient).

    Inter-event gaps (from ``observed_at``) are slept through, divided by
    ``speed``; ``speed=inf`` replays as fast as possible. Connection errors
    are retried against the same event, which is safe because the hub
    deduplicates by ``event_id``. Events the hub rejects are reported with
    ``accepted=false`` and replay continues.
    """
    import httpx

    from .errors import HubError

    if isinstance(events, (str, Path)):
        events = read_fixture(Path(events).read_text(encoding="utf-8").splitlines())
    if speed <= 0:
        raise ValueError("speed must be positive")
    report = ReplayReport()
    for idx, (event, gap) in enumerate(zip(events, _gaps(events))):
        if idx < start_after:
            continue
        if gap and math.isfinite(speed):
            time.sleep(gap / speed)
        payload = {k: v for k, v in event.items() if k != "_line"}
        line = event.get("_line", idx + 1)
        for attempt in range(retries + 1):
            try:
                ack = sink.submit_event(payload)
                item = ReplayItem(line, str(payload.get("event_id")), str(payload.get("site_id")), ack.accepted, ack.dedup, ack.outcome)
                break
            except (httpx.TransportError, StorageUnavailable) as exc:
                if attempt == retries:
                    raise ConnectionLost(f"giving up at line {line}: {exc}", report) from exc
                logger.warning("submit failed at line %s (%s); retrying", line, exc)
                time.sleep(retry_delay * 2**attempt)
            except HubError as exc:
                item = ReplayItem(line, str(payload.get("event_id")), str(payload.get("site_id")), False, False, f"rejected: {exc.code}: {exc}")
                break
        report.items.append(item)
        if on_ack is not None:
            on_ack(item)
    return report
