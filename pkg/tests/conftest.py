from __future__ import annotations

import json
from pathlib import Path

import pytest

from incident_hub.config import HubConfig
from incident_hub.hub import Hub

FIXTURES = Path(__file__).parent / "fixtures"
CANONICAL = FIXTURES / "canonical"

SITES = {"SITE-A": "Alpha Plaza", "SITE-B": "Beta Market"}


def small_config(**overrides) -> HubConfig:
    """A two-site deployment with tiny embeddings for fast unit tests."""
    base = {"dims": 4, "sites": dict(SITES), "fsync": False}
    base.update(overrides)
    return HubConfig(**base)


def canonical_config() -> HubConfig:
    return HubConfig.load(CANONICAL / "config.json")


def load_canonical(hub: Hub) -> Hub:
    """Register the canonical stations and suspects on ``hub``."""
    hub.load_station_file(CANONICAL / "stations.csv")
    for line in (CANONICAL / "suspects.jsonl").read_text(encoding="utf-8").splitlines():
        item = json.loads(line)
        hub.put_suspect(item["suspect"], item.get("face", []), item.get("fingerprint", []))
    return hub


def weapon(event_id: str, at: str, site: str = "SITE-A", confidence: float = 0.9, lat: float = 6.9, lon: float = 79.9, cls: str = "Gun") -> dict:
    return {
        "event_id": event_id, "site_id": site, "kind": "WeaponDetection", "observed_at": at,
        "position": {"lat": lat, "lon": lon}, "weapon_class": cls, "confidence": confidence,
    }


def biometric(event_id: str, kind: str, embedding, at: str = "2024-01-15T09:00:00Z", site: str = "SITE-A") -> dict:
    return {
        "event_id": event_id, "site_id": site, "kind": kind, "observed_at": at,
        "position": {"lat": 6.9, "lon": 79.9}, "embedding": [float(x) for x in embedding],
    }


@pytest.fixture
def config() -> HubConfig:
    return small_config()


@pytest.fixture
def hub(config) -> Hub:
    h = Hub(config)
    h.put_station({"station_id": "STN-1", "label": "North", "position": {"lat": 7.0, "lon": 79.9}})
    h.put_station({"station_id": "STN-2", "label": "South", "position": {"lat": 6.8, "lon": 79.9}})
    yield h
    h.close()
