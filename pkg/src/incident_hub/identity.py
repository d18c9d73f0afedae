"""Embedding normalization, cosine scoring and open-set gallery matching.

Galleries hold unit-normalized embeddings only, so a similarity score is a
plain dot product. A probe is accepted as a known identity only when its
best score is strictly greater than the modality threshold; unmatched
fingerprints are enrolled on the spot, unmatched faces are not.
"""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from .clock import format_ts, parse_ts, utcnow
from .errors import (
    DimensionMismatch,
    DuplicateId,
    NotFound,
    PersistenceFailure,
    ZeroVector,
)

DEFAULT_DIMS = 128
DEFAULT_THRESHOLD = 0.8
ZERO_NORM = 1e-12
UNIT_TOL = 1e-12
TIE_SLACK = 1e-9  # far above float dot-product error at any realistic dims
PLACEHOLDER_PREFIX = "UNIDENTIFIED-"
ANONYMOUS_ID_PREFIX = "S-UNID-"


class Modality(str, Enum):
    FACE = "Face"
    FINGERPRINT = "Fingerprint"


KEY_PREFIX = {Modality.FACE: "FACE-", Modality.FINGERPRINT: "FP-"}


def normalize(v: Sequence[float] | np.ndarray, dims: int | None = None) -> np.ndarray:
    """Return ``v`` scaled to unit Euclidean norm as a read-only float64 array."""
    arr = np.asarray(v, dtype=np.float64).ravel()
    if dims is not None and arr.shape[0] != dims:
        raise DimensionMismatch(f"expected {dims} dims, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ZeroVector("embedding contains non-finite values")
    norm = float(np.linalg.norm(arr))
    if norm < ZERO_NORM:
        raise ZeroVector("embedding norm is zero")
    # already-unit input is kept bit-for-bit so normalize is exactly idempotent
    out = arr.copy() if abs(norm - 1.0) <= UNIT_TOL else arr / norm
    out.setflags(write=False)
    return out


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionMismatch(f"dims differ: {a.shape[0]} vs {b.shape[0]}")
    return float(min(1.0, max(-1.0, float(np.dot(a, b)))))


def exceeds(score: float, threshold: float) -> bool:
    """The single acceptance predicate: a match needs a score strictly above threshold."""
    return score > threshold


@dataclass(frozen=True)
class GalleryEntry:
    key: str
    suspect_id: str
    modality: Modality
    embedding: np.ndarray
    enrolled_at: datetime

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "suspect_id": self.suspect_id,
            "modality": self.modality.value,
            "embedding": [float(x) for x in self.embedding],
            "enrolled_at": format_ts(self.enrolled_at),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GalleryEntry":
        emb = np.asarray(d["embedding"], dtype=np.float64)
        emb.setflags(write=False)
        return cls(
            key=d["key"],
            suspect_id=d["suspect_id"],
            modality=Modality(d["modality"]),
            embedding=emb,
            enrolled_at=parse_ts(d["enrolled_at"]),
        )


@dataclass(frozen=True)
class MatchResult:
    decision: str  # "Match" | "Unknown"
    best_score: float
    threshold_used: float
    suspect_id: str | None = None
    key: str | None = None

    @property
    def is_match(self) -> bool:
        return self.decision == "Match"

    def to_dict(self) -> dict:
        return {
            "decision": self.decision,
            "suspect_id": self.suspect_id,
            "key": self.key,
            "best_score": self.best_score,
            "threshold_used": self.threshold_used,
        }


@dataclass(frozen=True)
class _View:
    keys: tuple[str, ...]
    suspect_ids: tuple[str, ...]
    matrix: np.ndarray  # (n, dims), rows never mutated once published


class Gallery:
    """Enrolled embeddings for one modality.

    Readers work off an immutable view and never block; enrollment runs in
    an exclusive writer section and publishes a new view atomically, so a
    concurrent reader sees the gallery either before or after an entry, never
    half of one.
    """

    def __init__(
        self,
        modality: Modality | str,
        dims: int = DEFAULT_DIMS,
        on_enroll: Callable[[GalleryEntry], None] | None = None,
    ) -> None:
        if dims <= 0:
            raise ValueError("dims must be positive")
        self.modality = Modality(modality)
        self.dims = dims
        self.on_enroll = on_enroll
        self._entries: dict[str, GalleryEntry] = {}
        self._buf = np.empty((16, dims), dtype=np.float64)
        self._view = _View((), (), self._buf[:0])
        self._counter = 0
        self.write_lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._view.keys)

    def __iter__(self):
        view = self._view
        return iter([self._entries[k] for k in view.keys])

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> GalleryEntry:
        try:
            return self._entries[key]
        except KeyError:
            raise NotFound(f"gallery key {key!r} not found") from None

    def view(self) -> _View:
        return self._view

    def next_key(self) -> str:
        return f"{KEY_PREFIX[self.modality]}{self._counter + 1:06d}"

    def enroll(
        self,
        suspect_id: str,
        embedding: Sequence[float] | np.ndarray,
        enrolled_at: datetime | None = None,
        key: str | None = None,
    ) -> GalleryEntry:
        emb = normalize(embedding, self.dims)
        with self.write_lock:
            entry = GalleryEntry(
                key=key or self.next_key(),
                suspect_id=suspect_id,
                modality=self.modality,
                embedding=emb,
                enrolled_at=enrolled_at or utcnow(),
            )
            self.add(entry)
            return entry

    def add(self, entry: GalleryEntry) -> None:
        """Insert a fully-formed entry (import and state restore path)."""
        if entry.modality != self.modality:
            raise ValueError(f"{entry.modality.value} entry in {self.modality.value} gallery")
        if entry.embedding.shape != (self.dims,):
            raise DimensionMismatch(f"expected {self.dims} dims, got {entry.embedding.shape[0]}")
        with self.write_lock:
            if entry.key in self._entries:
                raise DuplicateId(f"gallery key {entry.key!r} already enrolled")
            if self.on_enroll is not None:
                try:
                    self.on_enroll(entry)
                except Exception as exc:
                    raise PersistenceFailure(f"enrollment write failed: {exc}") from exc
            n = len(self._view.keys)
            if n == self._buf.shape[0]:
                grown = np.empty((2 * n, self.dims), dtype=np.float64)
                grown[:n] = self._buf[:n]
                self._buf = grown
            self._buf[n] = entry.embedding
            self._entries[entry.key] = entry
            self._bump_counter(entry.key)
            matrix = self._buf[: n + 1]
            matrix.flags.writeable = False
            self._view = _View(
                self._view.keys + (entry.key,),
                self._view.suspect_ids + (entry.suspect_id,),
                matrix,
            )

    def _bump_counter(self, key: str) -> None:
        prefix = KEY_PREFIX[self.modality]
        if key.startswith(prefix) and key[len(prefix):].isdigit():
            self._counter = max(self._counter, int(key[len(prefix):]))

    def export_lines(self) -> list[str]:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for entry in sorted(self, key=lambda e: e.key):
            writer.writerow(
                [entry.key, entry.suspect_id, entry.modality.value]
                + [repr(float(x)) for x in entry.embedding]
            )
        return buf.getvalue().splitlines()

    def import_lines(self, lines: Iterable[str], enrolled_at: datetime | None = None) -> int:
        count = 0
        for row in csv.reader(line for line in lines if line.strip()):
            key, suspect_id, modality = row[0].strip(), row[1].strip(), Modality(row[2].strip())
            if modality != self.modality:
                continue
            self.enroll(suspect_id, [float(x) for x in row[3:]], enrolled_at, key=key)
            count += 1
        return count


def _as_view(gallery: Gallery | Sequence[GalleryEntry], dims: int) -> _View:
    if isinstance(gallery, Gallery):
        if gallery.dims != dims:
            raise DimensionMismatch(f"probe has {dims} dims, gallery has {gallery.dims}")
        return gallery.view()
    entries = list(gallery)
    for e in entries:
        if e.embedding.shape != (dims,):
            raise DimensionMismatch(f"probe has {dims} dims, entry {e.key} has {e.embedding.shape[0]}")
    matrix = np.stack([e.embedding for e in entries]) if entries else np.empty((0, dims))
    return _View(tuple(e.key for e in entries), tuple(e.suspect_id for e in entries), matrix)


def _exact_dot(a: np.ndarray, b: np.ndarray) -> Fraction:
    return sum((Fraction(float(x)) * Fraction(float(y)) for x, y in zip(a, b)), Fraction(0))


def match(
    probe: np.ndarray,
    gallery: Gallery | Sequence[GalleryEntry],
    threshold: float = DEFAULT_THRESHOLD,
) -> MatchResult:
    """Score ``probe`` against every entry and accept the best one if it clears ``threshold``.

    Equal best scores resolve to the lexicographically smallest key. An
    empty gallery yields ``Unknown`` with ``best_score = -1``.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    probe = np.asarray(probe, dtype=np.float64)
    view = _as_view(gallery, probe.shape[0])
    if not view.keys:
        return MatchResult("Unknown", -1.0, threshold)
    scores = view.matrix @ probe
    # Float dot products can split exact ties depending on summation order, so
    # every row near the top is rescored exactly before the tie rule applies;
    # the same happens when the best score sits next to the threshold.
    near = np.flatnonzero(scores >= scores.max() - TIE_SLACK)
    if len(near) == 1 and abs(float(scores[near[0]]) - threshold) > TIE_SLACK:
        idx = int(near[0])
        best = float(scores[idx])
    else:
        exact = {int(i): _exact_dot(view.matrix[i], probe) for i in near}
        top = max(exact.values())
        idx = min((i for i, v in exact.items() if v == top), key=lambda i: view.keys[i])
        best = float(top)
    best = min(1.0, max(-1.0, best))
    if exceeds(best, threshold):
        return MatchResult("Match", best, threshold, view.suspect_ids[idx], view.keys[idx])
    return MatchResult("Unknown", best, threshold)


@dataclass
class SuspectRecord:
    suspect_id: str
    name: str
    created_at: datetime
    age: int | None = None
    national_id: str | None = None

    def __post_init__(self) -> None:
        if self.age is not None and self.age < 0:
            raise ValueError("age must be non-negative")

    @property
    def is_placeholder(self) -> bool:
        return self.name.startswith(PLACEHOLDER_PREFIX)

    def to_dict(self) -> dict:
        return {
            "suspect_id": self.suspect_id,
            "name": self.name,
            "age": self.age,
            "national_id": self.national_id,
            "created_at": format_ts(self.created_at),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SuspectRecord":
        return cls(
            suspect_id=str(d["suspect_id"]),
            name=str(d["name"]),
            age=None if d.get("age") is None else int(d["age"]),
            national_id=d.get("national_id"),
            created_at=parse_ts(d["created_at"]),
        )


@dataclass
class SuspectRegistry:
    """Keyed suspect store with deterministic placeholder naming."""

    records: dict[str, SuspectRecord] = field(default_factory=dict)
    placeholder_counter: int = 0
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def put(self, record: SuspectRecord) -> SuspectRecord:
        with self.lock:
            if record.suspect_id in self.records:
                raise DuplicateId(f"suspect {record.suspect_id!r} already exists")
            self.records[record.suspect_id] = record
            return record

    def get(self, suspect_id: str) -> SuspectRecord:
        try:
            return self.records[suspect_id]
        except KeyError:
            raise NotFound(f"suspect {suspect_id!r} not found") from None

    def list(self) -> list[SuspectRecord]:
        return [self.records[k] for k in sorted(self.records)]

    def __contains__(self, suspect_id: str) -> bool:
        return suspect_id in self.records

    def create_anonymous(self, at: datetime) -> SuspectRecord:
        with self.lock:
            n = self.placeholder_counter + 1
            record = SuspectRecord(
                suspect_id=f"{ANONYMOUS_ID_PREFIX}{n:06d}", name=f"{PLACEHOLDER_PREFIX}{n}", created_at=at
            )
            self.put(record)
            self.placeholder_counter = n
            return record

    def discard(self, record: SuspectRecord) -> None:
        with self.lock:
            self.records.pop(record.suspect_id, None)
            if record.is_placeholder and record.name == f"{PLACEHOLDER_PREFIX}{self.placeholder_counter}":
                self.placeholder_counter -= 1


def identify_face(
    probe: np.ndarray,
    gallery: Gallery | Sequence[GalleryEntry],
    threshold: float = DEFAULT_THRESHOLD,
) -> MatchResult:
    """Open-set face identification. Unknown faces are not enrolled."""
    return match(probe, gallery, threshold)


def identify_fingerprint(
    probe: np.ndarray,
    gallery: Gallery,
    suspects: SuspectRegistry,
    suspect_hint: SuspectRecord | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    at: datetime | None = None,
) -> tuple[MatchResult, bool]:
    """Identify a fingerprint probe, enrolling it when nothing in the gallery matches.

    Returns ``(result, enrolled)``. The unmatched probe is bound to
    ``suspect_hint`` if given, otherwise to a fresh ``UNIDENTIFIED-<n>``
    record. Match and enrollment run under the gallery's writer lock so the
    same probe submitted twice enrolls at most once.
    """
    result = match(probe, gallery, threshold)
    if result.is_match:
        return result, False
    with gallery.write_lock:
        result = match(probe, gallery, threshold)
        if result.is_match:
            return result, False
        at = at or utcnow()
        if suspect_hint is not None:
            if suspect_hint.suspect_id not in suspects:
                raise NotFound(f"suspect {suspect_hint.suspect_id!r} not found")
            owner, created = suspect_hint, False
        else:
            owner, created = suspects.create_anonymous(at), True
        try:
            gallery.enroll(owner.suspect_id, probe, enrolled_at=at)
        except Exception:
            if created:
                suspects.discard(owner)
            raise
        return result, True
