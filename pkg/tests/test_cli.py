from __future__ import annotations

import json
import shutil
import socket
import subprocess
import sys
import threading
import time

import pytest
import uvicorn
from conftest import CANONICAL, FIXTURES

from incident_hub.api import create_app
from incident_hub.cli import main
from incident_hub.config import HubConfig
from incident_hub.hub import Hub


def run(capsys, *argv) -> tuple[int, str, str]:
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def deployment(tmp_path):
    """A copy of the canonical deployment with an empty store."""
    for name in ("config.json", "stations.csv", "suspects.jsonl", "events.jsonl"):
        shutil.copy(CANONICAL / name, tmp_path / name)
    return tmp_path


def test_golden_replay(deployment, capsys):
    cfg, store = str(deployment / "config.json"), str(deployment / "store")
    assert run(capsys, "--config", cfg, "--store", store, "suspect", "import", str(deployment / "suspects.jsonl"))[0] == 0
    code, out, _ = run(capsys, "--config", cfg, "--store", store, "replay", "--fixture", str(deployment / "events.jsonl"))
    assert code == 0
    assert out.splitlines() == (CANONICAL / "replay_report.golden").read_text("utf-8").splitlines()


def test_replay_digest_is_reproducible(deployment, capsys):
    cfg = str(deployment / "config.json")
    digests = []
    for store in ("s1", "s2"):
        path = str(deployment / store)
        run(capsys, "--config", cfg, "--store", path, "suspect", "import", str(deployment / "suspects.jsonl"))
        run(capsys, "--config", cfg, "--store", path, "replay", "--fixture", str(deployment / "events.jsonl"))
        digests.append(run(capsys, "--config", cfg, "--store", path, "digest")[1])
    assert digests[0] == digests[1] and len(digests[0].strip()) == 64


def test_summarize_command(capsys):
    code, out, _ = run(capsys, "summarize", "--in", str(FIXTURES / "one_sentence.txt"))
    assert (code, out) == (0, "The suspect fled.\n")
    code, out, _ = run(capsys, "summarize", "--in", str(FIXTURES / "three_sentences.txt"), "--k", "2")
    assert out.splitlines() == ["Robbery at the bank.", "The robbery was armed."]
    code, out, _ = run(capsys, "--format", "structured", "summarize", "--in", str(FIXTURES / "three_sentences.txt"))
    assert json.loads(out)["indices"] == [0]


def test_match_against_empty_gallery(tmp_path, capsys):
    probe = tmp_path / "probe.json"
    probe.write_text(json.dumps([0.1] * 128))
    code, out, _ = run(capsys, "match", "--modality", "face", "--probe", str(probe))
    assert (code, out) == (0, "Unknown best_score=-1 threshold_used=0.8\n")


def test_match_after_adding_suspect(tmp_path, capsys):
    face = tmp_path / "face.txt"
    face.write_text(" ".join(["0"] * 127 + ["1"]))
    store = str(tmp_path / "store")
    assert run(capsys, "--store", store, "suspect", "add", "--id", "S-9", "--name", "Nine", "--face", str(face))[0] == 0
    code, out, _ = run(capsys, "--store", store, "match", "--modality", "face", "--probe", str(face))
    assert out.startswith("Match suspect_id=S-9 key=FACE-") and out.rstrip().endswith("best_score=1 threshold_used=0.8")
    code, out, _ = run(capsys, "--store", store, "--format", "structured", "match", "--modality", "fingerprint", "--probe", str(face))
    assert json.loads(out)["decision"] == "Unknown"


def test_exit_codes(tmp_path, capsys):
    bad_probe = tmp_path / "p.json"
    bad_probe.write_text("[1, 2, 3]")
    assert run(capsys, "match", "--modality", "face", "--probe", str(bad_probe))[0] == 1
    code, _, err = run(capsys, "--store", str(tmp_path / "s"), "alarm", "ack", "ALM-000404", "--officer", "o")
    assert code == 1 and err.startswith("error: NotFound:")
    assert run(capsys, "summarize", "--in", str(tmp_path / "missing.txt"))[0] == 2
    assert run(capsys, "incident", "show", "INC-000001")[0] == 2  # needs a store
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["summarize", "--in", "x", "--ratio", "0.3", "--k", "2"])
    assert info.value.code == 2


def test_lists_are_sorted(tmp_path, capsys):
    store = str(tmp_path / "s")
    for sid in ("S-3", "S-1", "S-2"):
        run(capsys, "--store", store, "suspect", "add", "--id", sid, "--name", sid.lower())
    code, out, _ = run(capsys, "--store", store, "suspect", "list")
    assert [line.split("\t")[0] for line in out.splitlines()] == ["S-1", "S-2", "S-3"]
    run(capsys, "--store", store, "station", "add", "--id", "STN-B", "--label", "B", "--lat", "7", "--lon", "80")
    run(capsys, "--store", store, "station", "import", str(CANONICAL / "stations.csv"))
    code, out, _ = run(capsys, "--store", store, "station", "list")
    ids = [line.split("\t")[0] for line in out.splitlines()]
    assert ids == sorted(ids) and len(ids) == 11
    assert "STN-B\tB\t7\t80\tconsole:" in out.splitlines()


def test_incident_and_alarm_commands(deployment, capsys):
    cfg, store = str(deployment / "config.json"), str(deployment / "store")
    run(capsys, "--config", cfg, "--store", store, "replay", "--fixture", str(deployment / "events.jsonl"))
    code, out, _ = run(capsys, "--config", cfg, "--store", store, "incident", "list", "--site", "SITE-MALL")
    rows = [line.split("\t") for line in out.splitlines()]
    assert rows and all(r[1] == "SITE-MALL" for r in rows)
    first = rows[0]
    alarm = "ALM-" + first[0].split("-")[1]
    # global flags after the subcommand work too
    assert run(capsys, "alarm", "ack", alarm, "--officer", "officer-1", "--config", cfg, "--store", store)[1] == f"{alarm}\tAcknowledged\n"
    code, out, _ = run(capsys, "--config", cfg, "--store", store, "incident", "show", first[0])
    shown = json.loads(out)
    assert shown["alarm"]["state"] == "Acknowledged" and shown["notice"]["notice"]["station_id"] == first[3]
    assert run(capsys, "--config", cfg, "--store", store, "alarm", "ack", alarm, "--officer", "officer-2")[0] == 1


def test_structured_output_is_json_lines(deployment, capsys):
    cfg = str(deployment / "config.json")
    code, out, _ = run(capsys, "--config", cfg, "--format", "structured", "station", "list")
    rows = [json.loads(line) for line in out.splitlines()]
    assert len(rows) == 10 and all("station_id" in r for r in rows)


def test_fixture_command(tmp_path, capsys):
    code, out, _ = run(capsys, "fixture", "--out", str(tmp_path / "demo"), "--events", "500")
    assert code == 0 and "wrote 500 events" in out
    for name in ("config.json", "stations.csv", "suspects.jsonl", "events.jsonl"):
        assert (tmp_path / "demo" / name).read_bytes() == (CANONICAL / name).read_bytes()


@pytest.mark.parametrize("command", [[], ["suspect"], ["station"], ["match"], ["summarize"], ["replay"],
                                     ["incident"], ["alarm"], ["digest"], ["serve"], ["fixture"]])
def test_help(command, capsys):
    with pytest.raises(SystemExit) as info:
        main([*command, "--help"])
    assert info.value.code == 0
    assert "usage: incident-hub" in capsys.readouterr().out


def test_console_script_entry_point():
    exe = shutil.which("incident-hub")
    cmd = [exe] if exe else [sys.executable, "-m", "incident_hub.cli"]
    done = subprocess.run([*cmd, "summarize", "--in", str(FIXTURES / "one_sentence.txt")], capture_output=True, text=True)
    assert done.returncode == 0 and done.stdout == "The suspect fled.\n"


@pytest.fixture
def live_hub(tmp_path):
    """A real HTTP server on a free local port."""
    config = HubConfig.load(CANONICAL / "config.json")
    hub = Hub(config, tmp_path / "live")
    hub.load_station_file(config.stations_file)
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    server = uvicorn.Server(uvicorn.Config(create_app(hub), host="127.0.0.1", port=port, log_level="error"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started and time.monotonic() < deadline:
        time.sleep(0.02)
    yield hub, f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(5)
    hub.close()


def test_online_and_offline_modes_agree(deployment, live_hub, capsys):
    hub, url = live_hub
    cfg, store = str(deployment / "config.json"), str(deployment / "store")
    suspects, events = str(deployment / "suspects.jsonl"), str(deployment / "events.jsonl")
    offline, online = [], []
    run(capsys, "--config", cfg, "--store", store, "suspect", "import", suspects)
    offline.append(run(capsys, "--config", cfg, "--store", store, "replay", "--fixture", events)[1])
    run(capsys, "--hub", url, "suspect", "import", suspects)
    online.append(run(capsys, "--hub", url, "replay", "--fixture", events)[1])
    for argv in (["incident", "list"], ["incident", "show", "INC-000003"], ["suspect", "list"], ["station", "list"], ["digest"]):
        offline.append(run(capsys, "--config", cfg, "--store", store, *argv)[1])
        online.append(run(capsys, "--hub", url, *argv)[1])
    assert online == offline
    assert online[-1].strip() == hub.digest()
    code, _, err = run(capsys, "--hub", url, "alarm", "resolve", "ALM-999999", "--actor", "x")
    assert code == 1 and "NotFound" in err
