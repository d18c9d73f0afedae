from __future__ import annotations

import json
import threading
from datetime import datetime, timedelta, timezone

import pytest
from conftest import FIXTURES, biometric, small_config, weapon
from oracles import oracle_summary

from incident_hub.config import HubConfig
from incident_hub.errors import (
    AuthFailure,
    DeliveryError,
    IllegalTransition,
    MalformedEvent,
    NotFound,
    PayloadTooLarge,
    UnknownSite,
    UnknownStation,
)
from incident_hub.hub import Hub, default_transport
from incident_hub.summarizer import load_stopwords

T0 = datetime(2024, 1, 15, 9, 0, tzinfo=timezone.utc)


class ScriptedEndpoint:
    """Fake delivery endpoint that fails a scripted number of times."""

    def __init__(self, failures: int = 0) -> None:
        self.failures = failures
        self.calls: list[tuple[str, dict]] = []

    def __call__(self, endpoint: str, payload: dict) -> None:
        self.calls.append((endpoint, payload))
        if len(self.calls) <= self.failures:
            raise DeliveryError("endpoint down")


def fresh(transport=None, **cfg) -> Hub:
    h = Hub(small_config(**cfg), transport=transport)
    h.put_station({"station_id": "STN-1", "label": "North", "position": {"lat": 7.0, "lon": 79.9}}, now=T0)
    h.put_station({"station_id": "STN-2", "label": "South", "position": {"lat": 6.8, "lon": 79.9}}, now=T0)
    return h


# ingestion


def test_weapon_event_triggers_alarm_and_notice(hub):
    ack = hub.submit_event(weapon("w1", "2024-01-15T09:30:00Z", lat=6.85))
    assert ack.accepted and not ack.dedup and ack.sequence == 3
    assert ack.outcome == "alarm ALM-000001 triggered, notice NTC-000001 queued for station STN-2"
    inc = hub.get_incident("INC-000001")
    assert inc["alarm"]["state"] == "Dispatched" and inc["alarm"]["station_id"] == "STN-2"
    notice = inc["notice"]["notice"]
    assert (notice["date"], notice["time"]) == ("2024-01-15", "09:30:00")
    assert notice["position"] == {"lat": 6.85, "lon": 79.9}
    assert notice["site_label"] == "Alpha Plaza" and notice["status"] == "Pending"


def test_duplicate_event_changes_nothing(hub):
    hub.submit_event(weapon("w1", "2024-01-15T09:30:00Z"))
    before, seq = hub.digest(), hub.last_seq
    ack = hub.submit_event(weapon("w1", "2024-01-15T09:31:00Z", confidence=0.99))
    assert ack.accepted and ack.dedup and ack.sequence is None
    assert hub.digest() == before and hub.last_seq == seq
    # the same event_id at another site is a different event
    assert not hub.submit_event(weapon("w1", "2024-01-15T09:30:00Z", site="SITE-B")).dedup


def test_low_confidence_and_attach_outcomes(hub):
    assert hub.submit_event(weapon("w0", "2024-01-15T09:00:00Z", confidence=0.4)).outcome.startswith("ignored: confidence 0.4")
    hub.submit_event(weapon("w1", "2024-01-15T09:00:10Z"))
    assert hub.submit_event(weapon("w2", "2024-01-15T09:00:40Z")).outcome == "attached to active alarm ALM-000001"
    assert len(hub.list_incidents()) == 1


def test_rejections_write_nothing(hub):
    seq = hub.last_seq
    with pytest.raises(UnknownSite):
        hub.submit_event(weapon("w1", "2024-01-15T09:00:00Z", site="SITE-Z"))
    with pytest.raises(MalformedEvent):
        hub.submit_event(b"{not json")
    with pytest.raises(MalformedEvent):
        hub.submit_event({**weapon("w1", "2024-01-15T09:00:00Z"), "confidence": 1.5})
    with pytest.raises(MalformedEvent):
        hub.submit_event({**weapon("w1", "2024-01-15T09:00:00Z"), "extra": 1})
    with pytest.raises(MalformedEvent):
        hub.submit_event(biometric("f1", "FaceSighting", [1, 0, 0]))  # wrong dims
    with pytest.raises(MalformedEvent):
        hub.submit_event(biometric("f1", "FaceSighting", [0, 0, 0, 0]))
    with pytest.raises(MalformedEvent):
        hub.submit_event({**weapon("w1", "2024-01-15T09:00:00"), "observed_at": "2024-01-15T09:00:00"})  # naive time
    with pytest.raises(PayloadTooLarge):
        hub.submit_event(json.dumps(biometric("f1", "FaceSighting", [0.1] * 20_000)))
    assert hub.last_seq == seq


def test_fingerprint_enrolls_then_matches(hub):
    ack = hub.submit_event(biometric("f1", "FingerprintQuery", [1, 2, 3, 4]))
    assert ack.outcome == "enrolled as UNIDENTIFIED-1" and ack.details["enrolled"]
    again = hub.submit_event(biometric("f2", "FingerprintQuery", [1, 2, 3, 4]))
    assert again.outcome.startswith("fingerprint matched S-UNID-000001 (score=1")
    assert hub.get_suspect("S-UNID-000001").name == "UNIDENTIFIED-1"
    assert hub.submit_event(biometric("f3", "FingerprintQuery", [4, -3, 2, -1])).outcome == "enrolled as UNIDENTIFIED-2"


def test_fingerprint_suspect_hint(hub):
    hub.put_suspect({"suspect_id": "S-7", "name": "Hinted", "created_at": "2024-01-01T00:00:00Z"})
    event = {**biometric("f1", "FingerprintQuery", [0, 0, 1, 1]), "suspect_hint": "S-7"}
    assert hub.submit_event(event).outcome == "enrolled as Hinted"
    with pytest.raises(NotFound):
        hub.submit_event({**biometric("f2", "FingerprintQuery", [1, 1, 0, 0]), "suspect_hint": "S-404"})


def test_face_sightings_never_enroll(hub):
    hub.put_suspect({"suspect_id": "S-1", "name": "Face", "created_at": "2024-01-01T00:00:00Z"}, face=[[1, 0, 0, 0]])
    assert hub.submit_event(biometric("v1", "FaceSighting", [2, 0, 0, 0])).outcome == "face matched S-1 (score=1.0000)"
    assert hub.submit_event(biometric("v2", "FaceSighting", [0, 1, 0, 0])).outcome == "unidentified face sighting (best_score=0.0000)"
    assert len(hub.export_gallery("Face")) == 1


def test_identify_is_read_only(hub):
    r = hub.identify("Fingerprint", [1, 0, 0, 0])
    assert r.decision == "Unknown" and r.best_score == -1.0
    assert hub.export_gallery("Fingerprint") == []


def test_alarm_without_stations_is_dispatched_on_registration():
    h = Hub(small_config())
    ack = h.submit_event(weapon("w1", "2024-01-15T09:00:00Z"))
    assert "dispatch deferred" in ack.outcome
    assert h.get_incident("INC-000001")["alarm"]["state"] == "Triggered"
    result = h.put_station({"station_id": "STN-9", "label": "Late", "position": {"lat": 7, "lon": 80}}, now=T0)
    assert result["dispatched"] == ["NTC-000001"]
    assert h.get_incident("INC-000001")["alarm"]["station_id"] == "STN-9"


def test_gallery_import_export(hub):
    hub.put_suspect({"suspect_id": "S-1", "name": "A", "created_at": "2024-01-01T00:00:00Z"})
    hub.import_gallery(["FP-000010,S-1,Fingerprint,0,0,0,1"], now=T0)
    lines = hub.export_gallery("Fingerprint")
    assert lines == ["FP-000010,S-1,Fingerprint,0.0,0.0,0.0,1.0"]
    assert hub.identify("Fingerprint", [0, 0, 0, 3]).key == "FP-000010"
    with pytest.raises(NotFound):
        hub.import_gallery(["FP-000011,S-404,Fingerprint,1,0,0,0"])


# incidents and alarms


def test_acknowledge_resolve_read_your_write(hub):
    hub.submit_event(weapon("w1", "2024-01-15T09:00:00Z"))
    alarm = hub.acknowledge_alarm("ALM-000001", "officer-3", T0)
    assert alarm["state"] == "Acknowledged"
    assert hub.get_incident("INC-000001")["alarm"]["history"][-1]["actor"] == "officer-3"
    with pytest.raises(IllegalTransition):
        hub.acknowledge_alarm("ALM-000001", "officer-4", T0)
    assert hub.resolve_alarm("ALM-000001", "officer-3", T0)["state"] == "Resolved"
    with pytest.raises(IllegalTransition):
        hub.resolve_alarm("ALM-000001", "officer-3", T0)
    assert hub.submit_event(weapon("w2", "2024-01-15T09:00:30Z")).outcome.startswith("alarm ALM-000002 triggered")


def test_concurrent_acknowledge_one_winner(hub):
    hub.submit_event(weapon("w1", "2024-01-15T09:00:00Z"))
    barrier = threading.Barrier(6)
    outcomes = []

    def ack(i):
        barrier.wait()
        try:
            hub.acknowledge_alarm("ALM-000001", f"officer-{i}")
            outcomes.append("ok")
        except IllegalTransition:
            outcomes.append("conflict")

    threads = [threading.Thread(target=ack, args=(i,)) for i in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert outcomes.count("ok") == 1 and outcomes.count("conflict") == 5
    assert len(hub.get_incident("INC-000001")["alarm"]["history"]) == 3


def test_list_incidents_filters(hub):
    hub.submit_event(weapon("a1", "2024-01-15T09:00:00Z", site="SITE-A"))
    hub.submit_event(weapon("b1", "2024-01-15T09:00:00Z", site="SITE-B"))
    hub.submit_event(weapon("a2", "2024-01-15T10:00:00Z", site="SITE-A"))
    assert [i["incident_id"] for i in hub.list_incidents(site_id="SITE-A")] == ["INC-000001", "INC-000003"]
    hub.acknowledge_alarm("ALM-000003", "o")
    assert [i["incident_id"] for i in hub.list_incidents(state="Acknowledged")] == ["INC-000003"]


def test_summarize_stored_report(hub):
    hub.submit_event(weapon("w1", "2024-01-15T09:00:00Z"))
    text = (FIXTURES / "incident_report_10.txt").read_text("utf-8")
    hub.attach_report("INC-000001", text)
    s = hub.summarize_report("INC-000001", ratio=0.3)
    assert list(s.indices) == oracle_summary(text, load_stopwords(), "0.3")
    assert len(s.sentences) == 3
    assert hub.get_incident("INC-000001")["summary"]["indices"] == list(s.indices)
    # the cache is not durable state
    before = hub.digest()
    hub.summarize_report("INC-000001", k=1)
    assert hub.digest() == before
    with pytest.raises(NotFound):
        hub.summarize_report("INC-000404")
    with pytest.raises(ValueError):
        hub.summarize_report()


def test_report_size_limit():
    h = fresh(max_report_bytes=100)
    h.submit_event(weapon("w1", "2024-01-15T09:00:00Z"))
    with pytest.raises(PayloadTooLarge):
        h.attach_report("INC-000001", "x" * 101)
    with pytest.raises(PayloadTooLarge):
        h.summarize_report(text="word " * 30)


def test_notice_conservation(hub):
    for i in range(6):
        hub.submit_event(weapon(f"w{i}", f"2024-01-15T{9 + i:02d}:00:00Z", site=("SITE-A", "SITE-B")[i % 2]))
        hub.submit_event(weapon(f"x{i}", f"2024-01-15T{9 + i:02d}:00:30Z", site=("SITE-A", "SITE-B")[i % 2]))
    dispatched = [i for i in hub.list_incidents() if i["alarm"]["station_id"]]
    notices = hub.notices_after()
    assert len(notices) == len(dispatched) == 6
    stations = {s.station_id for s in hub.list_stations()}
    assert all(n["notice"]["station_id"] in stations for n in notices)


# delivery


def test_healthy_delivery_on_first_attempt():
    ep = ScriptedEndpoint()
    h = fresh(ep)
    h.submit_event(weapon("w1", "2024-01-15T09:00:00Z"))
    report = h.deliver_notices(T0)
    assert report == [{"notice_id": "NTC-000001", "outcome": "Delivered", "attempt": 1}]
    assert ep.calls[0][0] == "console:" and ep.calls[0][1]["notice"]["notice_id"] == "NTC-000001"
    assert h.get_incident("INC-000001")["notice"]["notice"]["status"] == "Delivered"
    assert h.deliver_notices(T0 + timedelta(hours=1)) == []


def test_backoff_then_delivery_on_third_attempt():
    ep = ScriptedEndpoint(failures=2)
    h = fresh(ep)
    h.submit_event(weapon("w1", "2024-01-15T09:00:00Z"))
    r1 = h.deliver_notices(T0)
    assert r1[0]["outcome"] == "Retrying" and r1[0]["next_retry_at"] == "2024-01-15T09:00:02Z"
    assert h.deliver_notices(T0 + timedelta(seconds=1)) == []  # not due yet
    r2 = h.deliver_notices(T0 + timedelta(seconds=2))
    assert r2[0]["outcome"] == "Retrying" and r2[0]["next_retry_at"] == "2024-01-15T09:00:06Z"  # 4 s later
    assert h.deliver_notices(T0 + timedelta(seconds=5)) == []
    r3 = h.deliver_notices(T0 + timedelta(seconds=6))
    assert r3 == [{"notice_id": "NTC-000001", "outcome": "Delivered", "attempt": 3}]
    env = h.get_incident("INC-000001")["notice"]
    assert env["attempt_count"] == 3 and not env["flagged"]
    history = [(e["status"], e["attempt"]) for e in h.get_incident("INC-000001")["status_history"]]
    assert history == [("Pending", 0), ("Pending", 1), ("Pending", 2), ("Delivered", 3)]


def test_failed_after_five_attempts_then_operator_retry():
    ep = ScriptedEndpoint(failures=10**6)
    h = fresh(ep)
    h.submit_event(weapon("w1", "2024-01-15T09:00:00Z"))
    now, schedule = T0, []
    for _ in range(5):
        r = h.deliver_notices(now)[0]
        schedule.append(r)
        if "next_retry_at" in r:
            now = datetime.fromisoformat(r["next_retry_at"].replace("Z", "+00:00"))
    assert [r["outcome"] for r in schedule] == ["Retrying"] * 4 + ["Failed"]
    gaps = [2, 4, 8, 16]
    times = [T0]
    for g in gaps:
        times.append(times[-1] + timedelta(seconds=g))
    assert [r.get("next_retry_at") for r in schedule[:4]] == [t.strftime("%Y-%m-%dT%H:%M:%SZ") for t in times[1:]]
    env = h.get_incident("INC-000001")["notice"]
    assert env["notice"]["status"] == "Failed" and env["flagged"] and env["attempt_count"] == 5
    assert h.deliver_notices(now + timedelta(days=1)) == []
    assert len(ep.calls) == 5
    h.retry_notice("NTC-000001", now)
    env = h.get_incident("INC-000001")["notice"]
    assert env["notice"]["status"] == "Pending" and not env["flagged"]
    with pytest.raises(IllegalTransition):
        h.retry_notice("NTC-000001", now)


def test_transport_exception_never_escapes():
    def explode(endpoint, payload):
        raise RuntimeError("boom")

    h = fresh(explode)
    h.submit_event(weapon("w1", "2024-01-15T09:00:00Z"))
    assert h.deliver_notices(T0)[0]["outcome"] == "Retrying"
    assert h.get_incident("INC-000001")["notice"]["last_error"] == "boom"


def test_default_transport_schemes():
    default_transport("console:", {})
    default_transport("null:", {})
    with pytest.raises(DeliveryError):
        default_transport("carrier-pigeon:coop", {})


def test_delivery_loop_runs_in_background():
    ep = ScriptedEndpoint()
    h = fresh(ep)
    h.submit_event(weapon("w1", "2024-01-15T09:00:00Z"))
    h.start_delivery_loop(interval=0.01)
    try:
        for _ in range(500):
            if ep.calls:
                break
            threading.Event().wait(0.01)
    finally:
        h.stop_delivery_loop()
    assert h.get_incident("INC-000001")["notice"]["notice"]["status"] == "Delivered"


# subscriptions


def test_subscribe_then_trigger(hub):
    sub = hub.subscribe()
    assert sub.poll() == []
    hub.submit_event(weapon("w1", "2024-01-15T09:00:00Z"))
    got = sub.poll()
    assert [n["notice"]["notice_id"] for n in got] == ["NTC-000001"]
    assert sub.poll() == []


def test_fan_out_and_station_scope(hub):
    a, b = hub.subscribe("STN-1"), hub.subscribe("STN-1")
    other = hub.subscribe("STN-2")
    hub.submit_event(weapon("w1", "2024-01-15T09:00:00Z", lat=7.0))
    assert len(a.poll()) == len(b.poll()) == 1
    assert other.poll() == []
    with pytest.raises(UnknownStation):
        hub.subscribe("STN-404")


def test_reconnect_resumes_without_gaps_or_duplicates(hub):
    sub = hub.subscribe()
    hub.submit_event(weapon("w0", "2024-01-15T08:00:00Z"))
    first = sub.poll()
    last_seen = first[-1]["notice"]["notice_id"]
    # disconnected while three alarms fire
    for i in range(3):
        hub.submit_event(weapon(f"w{i + 1}", f"2024-01-15T{10 + i}:00:00Z", site=("SITE-A", "SITE-B")[i % 2]))
    resumed = hub.subscribe(last_seen=last_seen)
    got = [n["notice"]["notice_id"] for n in resumed.poll()]
    assert got == ["NTC-000002", "NTC-000003", "NTC-000004"]
    with pytest.raises(NotFound):
        hub.subscribe(last_seen="NTC-999999")


def test_wait_blocks_until_a_notice_arrives(hub):
    sub = hub.subscribe()
    assert sub.wait(timeout=0.05) == []
    timer = threading.Timer(0.05, lambda: hub.submit_event(weapon("w1", "2024-01-15T09:00:00Z")))
    timer.start()
    got = sub.wait(timeout=5)
    timer.join()
    assert len(got) == 1


def test_authorize_scopes():
    h = Hub(HubConfig(dims=4, sites={"SITE-A": "A"}, tokens={"t-all": "*", "t-1": "STN-1"}, fsync=False))
    h.authorize("t-all", None)
    h.authorize("t-all", "STN-1")
    h.authorize("t-1", "STN-1")
    for token, scope in (("t-1", None), ("t-1", "STN-2"), ("bad", "STN-1"), (None, None)):
        with pytest.raises(AuthFailure):
            h.authorize(token, scope)
