"""Operator command line.

Every command is a thin wrapper over the hub API. Commands run against a
live hub (``--hub URL``), directly against a data directory (``--store DIR``
or the config's ``data_dir``), or, with neither, against a throwaway
in-memory hub.

Exit codes: 0 success, 1 domain error, 2 usage error. Diagnostics go to
stderr; stdout is line-oriented (``--format plain``) or one JSON object per
line (``--format structured``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

from .config import HubConfig
from .errors import HubError

log = logging.getLogger("incident_hub.cli")


class UsageError(Exception):
    pass


def _num(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def read_probe(path: str) -> list[float]:
    text = Path(path).read_text(encoding="utf-8").strip()
    try:
        values = json.loads(text)
    except ValueError:
        values = text.replace(",", " ").split()
    try:
        return [float(v) for v in values]
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: probe must be a list of numbers") from exc


def _global_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--config", type=Path, default=default, help="hub config file (JSON)")
    p.add_argument("--store", type=Path, default=default, help="operate directly on this data directory (offline mode)")
    p.add_argument("--hub", default=default, help="base URL of a running hub (online mode)")
    p.add_argument("--token", default=default, help="bearer token for --hub")
    p.add_argument("--format", choices=("plain", "structured"), default=default)
    p.add_argument("-v", "--verbose", action="store_true", default=default)


class _Sub:
    """Subparser group whose leaves inherit the global flags."""

    def __init__(self, group, common: argparse.ArgumentParser) -> None:
        self.group, self.common = group, common

    def add_parser(self, name: str, **kw) -> argparse.ArgumentParser:
        return self.group.add_parser(name, parents=[self.common], **kw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="incident-hub", description="Incident detection and dispatch hub.")
    _global_flags(p, argparse.SUPPRESS)
    p.set_defaults(config=None, store=None, hub=None, token=None, format="plain", verbose=False)
    # Global flags are also accepted after the subcommand.
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = _Sub(p.add_subparsers(dest="command", required=True), common)

    s = sub.add_parser("serve", help="run the hub until interrupted")
    s.add_argument("--bind", help="override the config's bind address (host:port)")

    suspect = _Sub(sub.add_parser("suspect", help="suspect registry").add_subparsers(dest="action", required=True), common)
    a = suspect.add_parser("add", help="register a suspect")
    a.add_argument("--id", required=True, dest="suspect_id")
    a.add_argument("--name", required=True)
    a.add_argument("--age", type=int)
    a.add_argument("--national-id")
    a.add_argument("--face", action="append", default=[], metavar="FILE", help="face embedding file (repeatable)")
    a.add_argument("--fingerprint", action="append", default=[], metavar="FILE", help="fingerprint embedding file (repeatable)")
    suspect.add_parser("list", help="list suspects")
    i = suspect.add_parser("import", help="load suspects from a JSON-lines file")
    i.add_argument("file", type=Path)

    station = _Sub(sub.add_parser("station", help="station registry").add_subparsers(dest="action", required=True), common)
    a = station.add_parser("add", help="register a police station")
    a.add_argument("--id", required=True, dest="station_id")
    a.add_argument("--label", required=True)
    a.add_argument("--lat", type=float, required=True)
    a.add_argument("--lon", type=float, required=True)
    a.add_argument("--endpoint", default="console:")
    station.add_parser("list", help="list stations")
    i = station.add_parser("import", help="load a station registry file")
    i.add_argument("file", type=Path)

    m = sub.add_parser("match", help="one-shot identification (no enrollment)")
    m.add_argument("--modality", choices=("face", "fingerprint"), required=True)
    m.add_argument("--probe", required=True, metavar="FILE")

    s = sub.add_parser("summarize", help="extractive summary of a report")
    s.add_argument("--in", dest="infile", required=True, metavar="FILE")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--ratio", type=float)
    g.add_argument("--k", type=int)

    r = sub.add_parser("replay", help="replay a fixture of detector events")
    r.add_argument("--fixture", required=True, type=Path)
    r.add_argument("--speed", type=float, default=math.inf, help="time compression factor (default: no delays)")

    inc = _Sub(sub.add_parser("incident", help="incidents").add_subparsers(dest="action", required=True), common)
    a = inc.add_parser("list")
    a.add_argument("--site")
    a.add_argument("--state")
    a = inc.add_parser("show")
    a.add_argument("incident_id")

    al = _Sub(sub.add_parser("alarm", help="alarm lifecycle").add_subparsers(dest="action", required=True), common)
    a = al.add_parser("ack")
    a.add_argument("alarm_id")
    a.add_argument("--officer", required=True)
    a = al.add_parser("resolve")
    a.add_argument("alarm_id")
    a.add_argument("--actor", required=True)

    sub.add_parser("digest", help="print the state digest")

    f = sub.add_parser("fixture", help="write the canonical demo deployment and event fixture")
    f.add_argument("--out", type=Path, required=True)
    f.add_argument("--events", type=int, default=500)
    return p


def _config(args) -> HubConfig:
    return HubConfig.load(args.config) if args.config else HubConfig()


def open_backend(args, need_store: bool = False):
    """Return ``(backend, closer)`` for the selected mode."""
    if args.hub:
        from .client import HubClient

        client = HubClient(args.hub, token=args.token)
        return client, client.close
    from .hub import Hub

    config = _config(args)
    data_dir = args.store or config.data_dir
    if need_store and data_dir is None:
        raise UsageError("this command needs --store, --hub or a config with data_dir")
    hub = Hub(config, data_dir)
    if config.stations_file is not None:
        hub.load_station_file(config.stations_file)
    return hub, hub.close


def _emit(args, plain: str, structured: dict | list) -> None:
    if args.format == "structured":
        print(json.dumps(structured, sort_keys=True))
    else:
        print(plain)


def format_match(result) -> str:
    if result.is_match:
        return (f"Match suspect_id={result.suspect_id} key={result.key} "
                f"best_score={_num(result.best_score)} threshold_used={_num(result.threshold_used)}")
    return f"Unknown best_score={_num(result.best_score)} threshold_used={_num(result.threshold_used)}"


def cmd_serve(args) -> int:
    import uvicorn

    from .api import create_app
    from .hub import Hub

    if args.config is None:
        raise UsageError("serve needs --config")
    config = _config(args)
    if args.store:
        config.data_dir = args.store
    if args.bind:
        config.bind = args.bind
    host, port = config.bind_host_port()
    hub = Hub(config)
    if config.stations_file is not None:
        hub.load_station_file(config.stations_file)
    rec = hub.recovery
    print(f"listening on http://{host}:{port}")
    print(f"recovered snapshot_seq={rec.snapshot_seq} replayed={rec.replayed} last_seq={rec.last_seq} "
          f"truncated_bytes={rec.truncated_bytes} digest={rec.digest}", flush=True)
    hub.start_delivery_loop()
    try:
        uvicorn.run(create_app(hub), host=host, port=port, log_level="warning")
    finally:
        if hub.data_dir is not None:
            hub.snapshot()
        hub.close()
    return 0


def cmd_suspect(args, backend) -> int:
    if args.action == "add":
        from .clock import format_ts, utcnow

        record = {
            "suspect_id": args.suspect_id, "name": args.name, "age": args.age,
            "national_id": args.national_id, "created_at": format_ts(utcnow()),
        }
        result = backend.put_suspect(
            record,
            face=[read_probe(f) for f in args.face],
            fingerprint=[read_probe(f) for f in args.fingerprint],
        )
        _emit(args, f"{args.suspect_id}\t{' '.join(result.get('keys', []))}".rstrip(), result)
    elif args.action == "import":
        for line in args.file.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            item = json.loads(line)
            result = backend.put_suspect(item["suspect"], item.get("face", []), item.get("fingerprint", []))
            _emit(args, f"{result['suspect_id']}\t{' '.join(result.get('keys', []))}".rstrip(), result)
    else:
        for s in backend.list_suspects():
            d = s.to_dict()
            _emit(args, "\t".join("" if d[k] is None else str(d[k]) for k in ("suspect_id", "name", "age", "national_id", "created_at")), d)
    return 0


def cmd_station(args, backend) -> int:
    from .geo import GeoPoint, Station, read_station_file

    if args.action == "add":
        station = Station(args.station_id, args.label, GeoPoint(args.lat, args.lon), args.endpoint)
        result = backend.put_station(station.to_dict())
        _emit(args, station.station_id, result)
    elif args.action == "import":
        known = {s.station_id for s in backend.list_stations()}
        for station in read_station_file(args.file.read_text(encoding="utf-8").splitlines()):
            if station.station_id in known:
                continue
            result = backend.put_station(station.to_dict())
            _emit(args, station.station_id, result)
    else:
        for s in backend.list_stations():
            _emit(args, f"{s.station_id}\t{s.label}\t{_num(s.position.lat)}\t{_num(s.position.lon)}\t{s.delivery_endpoint}", s.to_dict())
    return 0


def cmd_match(args, backend) -> int:
    result = backend.identify(args.modality.capitalize(), read_probe(args.probe))
    _emit(args, format_match(result), result.to_dict())
    return 0


def cmd_summarize(args, backend) -> int:
    text = Path(args.infile).read_text(encoding="utf-8")
    summary = backend.summarize_report(text=text, ratio=args.ratio, k=args.k)
    if args.format == "structured":
        print(json.dumps(summary.to_dict(), sort_keys=True, ensure_ascii=False))
    else:
        for sentence in summary.sentences:
            print(sentence)
    return 0


def cmd_replay(args, backend) -> int:
    from .sim import replay

    report = replay(args.fixture, backend, speed=args.speed)
    for item in report.items:
        _emit(args, item.to_line(), dict(item.__dict__))
    return 0


def cmd_incident(args, backend) -> int:
    if args.action == "show":
        d = backend.get_incident(args.incident_id)
        print(json.dumps(d, sort_keys=True, indent=None if args.format == "structured" else 2))
        return 0
    for d in backend.list_incidents(args.site, args.state):
        alarm = d["alarm"]
        _emit(args, f"{d['incident_id']}\t{d['site_id']}\t{alarm['state']}\t{alarm['station_id'] or '-'}\t{d['notice_id'] or '-'}", d)
    return 0


def cmd_alarm(args, backend) -> int:
    if args.action == "ack":
        alarm = backend.acknowledge_alarm(args.alarm_id, args.officer)
    else:
        alarm = backend.resolve_alarm(args.alarm_id, args.actor)
    _emit(args, f"{alarm['alarm_id']}\t{alarm['state']}", alarm)
    return 0


def cmd_fixture(args) -> int:
    from .sim import (
        build_canonical_fixture,
        canonical_config_dict,
        canonical_station_lines,
        canonical_suspects,
        write_fixture,
    )

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    plan = build_canonical_fixture(args.events)
    config = canonical_config_dict()
    config["stations_file"] = "stations.csv"
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    (out / "stations.csv").write_text("\n".join(canonical_station_lines()) + "\n", encoding="utf-8")
    with open(out / "suspects.jsonl", "w", encoding="utf-8") as f:
        for item in canonical_suspects(plan):
            f.write(json.dumps(item, separators=(",", ":")) + "\n")
    write_fixture(out / "events.jsonl", plan.events)
    print(f"wrote {len(plan.events)} events ({plan.expected_alarms} weapon bursts) to {out}")
    return 0


COMMANDS = {
    "suspect": cmd_suspect, "station": cmd_station, "match": cmd_match, "summarize": cmd_summarize,
    "replay": cmd_replay, "incident": cmd_incident, "alarm": cmd_alarm,
}
NEEDS_STORE = {"suspect", "station", "incident", "alarm"}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "serve":
            return cmd_serve(args)
        if args.command == "fixture":
            return cmd_fixture(args)
        backend, close = open_backend(args, need_store=args.command in NEEDS_STORE and args.action not in ("list",))
        try:
            if args.command == "digest":
                _emit(args, backend.digest(), {"digest": backend.digest()})
                return 0
            return COMMANDS[args.command](args, backend)
        finally:
            close()
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except HubError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
