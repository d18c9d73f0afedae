"""Hub configuration, loaded from a JSON file.

Example::

    {
      "identity": {"dims": 128, "face_threshold": 0.8, "fingerprint_threshold": 0.8},
      "alarm": {"confidence_gate": 0.5, "debounce_seconds": 120},
      "delivery": {"base_seconds": 2, "factor": 2, "max_attempts": 5},
      "sites": {"SITE-A": {"label": "Bank, Main St"}},
      "stations_file": "stations.csv",
      "stopwords_file": null,
      "data_dir": "hub-data",
      "bind": "127.0.0.1:8080",
      "tokens": {"secret-console": "*", "secret-stn1": "STN-01"}
    }

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .alarms import DEFAULT_CONFIDENCE_GATE, DEFAULT_DEBOUNCE_SECONDS
from .identity import DEFAULT_DIMS, DEFAULT_THRESHOLD

ALL_STATIONS = "*"


@dataclass
class HubConfig:
    dims: int = DEFAULT_DIMS
    face_threshold: float = DEFAULT_THRESHOLD
    fingerprint_threshold: float = DEFAULT_THRESHOLD
    confidence_gate: float = DEFAULT_CONFIDENCE_GATE
    debounce_seconds: float = DEFAULT_DEBOUNCE_SECONDS
    retry_base_seconds: float = 2.0
    retry_factor: float = 2.0
    max_attempts: int = 5
    sites: dict[str, str] = field(default_factory=dict)  # site_id -> label
    stations_file: Path | None = None
    stopwords_file: Path | None = None
    data_dir: Path | None = None
    bind: str = "127.0.0.1:8080"
    tokens: dict[str, str] = field(default_factory=dict)  # bearer token -> station_id or "*"
    fsync: bool = True
    max_embedding_bytes: int = 64 * 1024
    max_report_bytes: int = 1024 * 1024

    def __post_init__(self) -> None:
        if self.dims <= 0:
            raise ValueError("identity.dims must be positive")
        for name in ("face_threshold", "fingerprint_threshold", "confidence_gate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.debounce_seconds < 0 or self.retry_base_seconds <= 0 or self.retry_factor < 1:
            raise ValueError("invalid debounce or retry settings")
        if self.max_attempts < 1:
            raise ValueError("delivery.max_attempts must be >= 1")

    @property
    def auth_enabled(self) -> bool:
        return bool(self.tokens)

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "HubConfig":
        known = {
            "identity", "alarm", "delivery", "sites", "stations_file", "stopwords_file",
            "data_dir", "bind", "tokens", "fsync", "limits",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = base or Path.cwd()

        def path(key: str) -> Path | None:
            value = d.get(key)
            return None if value is None else (base / value)

        identity, alarm, delivery, limits = (d.get(k, {}) for k in ("identity", "alarm", "delivery", "limits"))
        sites = {}
        for site_id, entry in (d.get("sites") or {}).items():
            sites[site_id] = entry.get("label", site_id) if isinstance(entry, dict) else str(entry)
        return cls(
            dims=int(identity.get("dims", DEFAULT_DIMS)),
            face_threshold=float(identity.get("face_threshold", DEFAULT_THRESHOLD)),
            fingerprint_threshold=float(identity.get("fingerprint_threshold", DEFAULT_THRESHOLD)),
            confidence_gate=float(alarm.get("confidence_gate", DEFAULT_CONFIDENCE_GATE)),
            debounce_seconds=float(alarm.get("debounce_seconds", DEFAULT_DEBOUNCE_SECONDS)),
            retry_base_seconds=float(delivery.get("base_seconds", 2.0)),
            retry_factor=float(delivery.get("factor", 2.0)),
            max_attempts=int(delivery.get("max_attempts", 5)),
            sites=sites,
            stations_file=path("stations_file"),
            stopwords_file=path("stopwords_file"),
            data_dir=path("data_dir"),
            bind=str(d.get("bind", "127.0.0.1:8080")),
            tokens={str(k): str(v) for k, v in (d.get("tokens") or {}).items()},
            fsync=bool(d.get("fsync", True)),
            max_embedding_bytes=int(limits.get("max_embedding_bytes", 64 * 1024)),
            max_report_bytes=int(limits.get("max_report_bytes", 1024 * 1024)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "HubConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), base=path.resolve().parent)

    def bind_host_port(self) -> tuple[str, int]:
        host, _, port = self.bind.rpartition(":")
        return host or "127.0.0.1", int(port)
