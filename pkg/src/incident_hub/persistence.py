"""Append-only record log and state snapshots.

Log layout::

    header   b"IHLG" + uint32 version            (8 bytes)
    record   uint32 length | uint32 crc32 | JSON payload (length bytes)

Every payload carries a dense ``seq`` starting at 1. A torn or corrupt tail
(partial frame, bad checksum, bad JSON, sequence gap) is cut back to the last
valid record when the log is reopened; the number of discarded bytes is
reported to the caller.

A snapshot is one JSON document followed by a ``sha256:<hex>`` footer line
holding the state digest, written atomically via rename.
"""

from __future__ import annotations

import errno
import hashlib
import json
import logging
import os
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

from .errors import CorruptLog, IoFailure, StorageFull

logger = logging.getLogger(__name__)

MAGIC = b"IHLG"
VERSION = 1
HEADER = MAGIC + struct.pack(">I", VERSION)
FRAME = struct.Struct(">II")
MAX_RECORD = 64 * 1024 * 1024

SNAPSHOT_FORMAT = "incident-hub-snapshot"
SNAPSHOT_VERSION = 1


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


def state_digest(state: dict) -> str:
    return hashlib.sha256(canonical_json(state)).hexdigest()


@dataclass
class LogScan:
    records: list[dict]
    valid_end: int
    file_size: int

    @property
    def truncated_bytes(self) -> int:
        return self.file_size - self.valid_end


def scan_log(path: Path) -> LogScan:
    """Read every valid record of the log at ``path`` without modifying it."""
    data = path.read_bytes() if path.exists() else b""
    if not data:
        return LogScan([], 0, 0)
    if len(data) < len(HEADER):
        # a crash while writing the header of a fresh log
        if HEADER.startswith(data):
            return LogScan([], 0, len(data))
        raise CorruptLog(f"{path}: bad log header")
    if data[:4] != MAGIC:
        raise CorruptLog(f"{path}: not an event log (magic {data[:4]!r})")
    (version,) = struct.unpack(">I", data[4:8])
    if version != VERSION:
        raise CorruptLog(f"{path}: unsupported log version {version}")
    records: list[dict] = []
    pos = len(HEADER)
    while pos + FRAME.size <= len(data):
        length, crc = FRAME.unpack_from(data, pos)
        start, end = pos + FRAME.size, pos + FRAME.size + length
        if length > MAX_RECORD or end > len(data):
            break
        payload = data[start:end]
        if zlib.crc32(payload) != crc:
            break
        try:
            record = json.loads(payload)
        except ValueError:
            break
        if record.get("seq") != len(records) + 1:
            break
        records.append(record)
        pos = end
    return LogScan(records, pos, len(data))


class EventLog:
    """Single-writer append-only log. Appends are durable once ``append`` returns."""

    def __init__(self, path: str | Path, fsync: bool = True) -> None:
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        scan = scan_log(self.path)
        self.recovered = scan.records
        self.truncated_bytes = scan.truncated_bytes
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "r+b" if self.path.exists() else "w+b")
        if scan.valid_end == 0:
            self._f.truncate(0)
            self._f.write(HEADER)
            self._sync()
            self._end = len(HEADER)
        else:
            if scan.truncated_bytes:
                logger.warning("discarding %d corrupt bytes at tail of %s", scan.truncated_bytes, self.path)
                self._f.truncate(scan.valid_end)
                self._sync()
            self._end = scan.valid_end
        self.last_seq = len(scan.records)

    def _sync(self) -> None:
        self._f.flush()
        if self.fsync:
            os.fsync(self._f.fileno())

    def append(self, record: dict) -> int:
        """Append ``record`` (a JSON object) and return its sequence number."""
        with self._lock:
            seq = self.last_seq + 1
            payload = canonical_json({**record, "seq": seq})
            frame = FRAME.pack(len(payload), zlib.crc32(payload)) + payload
            try:
                self._f.seek(self._end)
                self._f.write(frame)
                self._sync()
            except OSError as exc:
                self._rollback()
                if exc.errno in (errno.ENOSPC, errno.EDQUOT):
                    raise StorageFull(f"log device full: {exc}") from exc
                raise IoFailure(f"log write failed: {exc}") from exc
            self._end += len(frame)
            self.last_seq = seq
            return seq

    def append_event(self, event: dict) -> int:
        return self.append({"type": "event", "event": event})

    def _rollback(self) -> None:
        try:
            self._f.truncate(self._end)
            self._f.flush()
        except OSError:
            logger.exception("could not roll back partial write in %s", self.path)

    def records(self) -> Iterator[dict]:
        return iter(scan_log(self.path).records)

    def close(self) -> None:
        with self._lock:
            if not self._f.closed:
                self._f.close()


def write_snapshot(path: str | Path, seq: int, state: dict) -> str:
    path = Path(path)
    digest = state_digest(state)
    body = json.dumps(
        {"format": SNAPSHOT_FORMAT, "version": SNAPSHOT_VERSION, "seq": seq, "state": state},
        sort_keys=True,
        ensure_ascii=False,
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(body + "\n")
        f.write(f"sha256:{digest}\n")
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return digest


def read_snapshot(path: str | Path) -> tuple[int, dict] | None:
    """Return ``(seq, state)`` or ``None`` when no usable snapshot exists."""
    path = Path(path)
    if not path.exists():
        return None
    text = path.read_text(encoding="utf-8")
    body, _, footer = text.rstrip("\n").rpartition("\n")
    try:
        doc = json.loads(body)
    except ValueError:
        logger.warning("snapshot %s is unreadable; ignoring it", path)
        return None
    if doc.get("format") != SNAPSHOT_FORMAT or doc.get("version") != SNAPSHOT_VERSION:
        logger.warning("snapshot %s has unknown format; ignoring it", path)
        return None
    if footer != f"sha256:{state_digest(doc['state'])}":
        logger.warning("snapshot %s digest mismatch; ignoring it", path)
        return None
    return int(doc["seq"]), doc["state"]
