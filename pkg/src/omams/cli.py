"""Command-line entry points.

omamsd          central daemon (TCP)
omams-scan      scan-unit emulator: send one badge scan
omams-display   read-only board tail
omams-report    work-hours / utilization reports from a journal
omams-sim       run scenario files through the simulator and compare with the oracle

Exit codes
----------
0  success (scan acknowledged, report written, all simulations PASS)
1  configuration or usage error; scan could not be delivered; a simulation FAILed
2  journal corrupt before its final line (daemon prints the first bad seq)
3  scan rejected by the central unit
4  unknown machine id in a utilization report
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import socket
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .central import CentralUnit
from .core import DisplayBoard, EventKind, OmamsError, ScanEvent, parse_badge_code
from .journal import (
    CorruptRecord,
    Journal,
    UnknownMachine,
    read_journal,
    report_csv,
    report_json,
    report_table,
    utilization_report,
    work_hours_report,
)
from .protocol import (
    FrameReader,
    ProtocolError,
    backoff_ms,
    encode_frame,
    msg_board,
    msg_hello,
    msg_notify,
    msg_pong,
    msg_scan,
)
from .registry import RegistryError, load_registry

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("omams")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CORRUPT = 2
EXIT_REJECTED = 3
EXIT_UNKNOWN = 4


class ConfigError(OmamsError):
    pass


@dataclass
class Config:
    host: str
    port: int
    registry: Path
    journal: Path
    outbox: Path
    fsync: bool = True


def load_config(path: Path) -> Config:
    try:
        raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"bad config {path}: {e}") from None
    base = Path(path).parent
    missing = {"listen_addr", "registry", "journal", "outbox"} - set(raw)
    if missing:
        raise ConfigError(f"config {path} missing {sorted(missing)}")
    extra = set(raw) - {"listen_addr", "registry", "journal", "outbox", "fsync"}
    if extra:
        raise ConfigError(f"config {path} has unknown keys {sorted(extra)}")
    host, _, port = str(raw["listen_addr"]).rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"listen_addr must be host:port, got {raw['listen_addr']!r}")
    return Config(
        host=host,
        port=int(port),
        registry=base / raw["registry"],
        journal=base / raw["journal"],
        outbox=base / raw["outbox"],
        fsync=bool(raw.get("fsync", True)),
    )


def config_path(arg: Optional[str]) -> Path:
    return Path(os.environ.get("OMAMS_CONFIG") or arg or "omams.toml")


def now_ms() -> int:
    return time.time_ns() // 1_000_000


# -- daemon ------------------------------------------------------------------


class Daemon:
    """The central unit behind a TCP listener.

    All scans are applied on the event loop thread without awaiting in
    between, so the loop itself is the single writer.
    """

    def __init__(self, config: Config):
        self.config = config
        self.central: Optional[CentralUnit] = None
        self.server: Optional[asyncio.base_events.Server] = None
        self.displays: set[asyncio.StreamWriter] = set()
        self.recovered_torn: Optional[CorruptRecord] = None

    def open(self) -> None:
        """Load registry and replay the journal. Raises ConfigError / CorruptRecord."""
        try:
            registry = load_registry(self.config.registry.read_bytes())
        except OSError as e:
            raise ConfigError(f"cannot read registry: {e}") from None
        except RegistryError as e:
            raise ConfigError(f"bad registry: {e}") from None
        journal, err = Journal.open(self.config.journal, fsync=self.config.fsync)
        if err is not None:
            self.recovered_torn = err
            log.warning("journal had a torn final line; recovered %d records", journal.last_seq)
        self.central = CentralUnit.recover(registry, journal)
        log.info("replayed %d journal records", journal.last_seq)
        self.central.mark("startup", now_ms())

    @property
    def address(self) -> tuple[str, int]:
        return self.server.sockets[0].getsockname()[:2]

    async def start(self) -> None:
        if self.central is None:
            self.open()
        self.server = await asyncio.start_server(self._serve, self.config.host, self.config.port)
        log.info("listening on %s:%d", *self.address)

    async def stop(self) -> None:
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        for w in list(self.displays):
            w.close()
        if self.central is not None:
            self.central.journal.close()

    def _write_outbox(self, notifies) -> None:
        if not notifies:
            return
        with open(self.config.outbox, "a", encoding="utf-8") as fh:
            for n in notifies:
                fh.write(json.dumps({"operator": n.operator, "text": n.text}) + "\n")

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        frames = FrameReader()
        try:
            while True:
                data = await reader.read(4096)
                if not data:
                    break
                for msg in frames.feed(data):
                    await self._dispatch(msg, writer)
        except ProtocolError as e:
            log.warning("dropping connection: %s", e)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self.displays.discard(writer)
            writer.close()

    async def _dispatch(self, msg: dict, writer: asyncio.StreamWriter):
        t = msg["t"]
        if t == "hello":
            if msg.get("role") == "display":
                self.displays.add(writer)
                writer.write(encode_frame(msg_board(self.central.board)))
        elif t == "ping":
            writer.write(encode_frame(msg_pong()))
        elif t == "scan":
            ev = ScanEvent.from_dict(msg["event"])
            out = self.central.handle_scan(ev, max(now_ms(), self.central.now_floor))
            self._write_outbox(out.notifies)
            writer.write(encode_frame(out.reply))
            if out.board is not None:
                frame = encode_frame(msg_board(out.board))
                notes = [encode_frame(msg_notify(n.operator, n.text)) for n in out.notifies]
                for d in list(self.displays):
                    d.write(frame)
                    for n in notes:
                        d.write(n)
        await writer.drain()


def omamsd(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="omamsd", description="Central allocation daemon.")
    ap.add_argument("config", nargs="?", help="config file (OMAMS_CONFIG overrides)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        daemon = Daemon(load_config(config_path(args.config)))
        daemon.open()
    except ConfigError as e:
        print(f"omamsd: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CorruptRecord as e:
        print(f"omamsd: journal corrupt at seq {e.seq}: {e.detail}", file=sys.stderr)
        return EXIT_CORRUPT

    async def main():
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await daemon.start()
        await stop.wait()
        await daemon.stop()

    asyncio.run(main())
    log.info("shut down cleanly")
    return EXIT_OK


# -- scan unit ---------------------------------------------------------------


def _split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def _recv_message(sock: socket.socket, reader: FrameReader):
    while True:
        data = sock.recv(4096)
        if not data:
            raise ConnectionError("connection closed")
        for msg in reader.feed(data):
            return msg


def deliver_scan(addr: str, ev: ScanEvent, *, deadline_s: float = 60.0) -> dict:
    """Send ``ev`` until an ack or reject for it comes back, with backoff."""
    host, port = _split_addr(addr)
    frame = encode_frame(msg_scan(ev))
    give_up = time.monotonic() + deadline_s
    attempt = 1
    while True:
        wait = backoff_ms(attempt) / 1000
        try:
            with socket.create_connection((host, port), timeout=wait) as sock:
                sock.settimeout(wait)
                sock.sendall(encode_frame(msg_hello(ev.unit_id)) + frame)
                reader = FrameReader()
                while True:
                    msg = _recv_message(sock, reader)
                    if msg["t"] in ("ack", "reject") and msg["seq"] == ev.unit_seq:
                        return msg
        except (OSError, ConnectionError, ProtocolError) as e:
            if time.monotonic() + wait > give_up:
                raise ConnectionError(f"no answer from {addr}: {e}") from None
            time.sleep(wait)
            attempt += 1


def describe_reply(msg: dict) -> str:
    if msg["t"] == "reject":
        return f"REJECTED {msg['reason']}"
    result = msg.get("result") or {}
    r = result.get("result")
    if r == "allotted":
        return f"ALLOTTED {result['machine']}"
    if r == "waiting":
        return f"WAITING pos={result['position']}"
    if r == "checked_out":
        return "CHECKED-OUT"
    return "ACK"


def omams_scan(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="omams-scan", description="Send one badge scan.")
    ap.add_argument("address", help="daemon host:port")
    ap.add_argument("unit", help="scan unit id")
    ap.add_argument("action", choices=["in", "out", "claim"])
    ap.add_argument("badge")
    ap.add_argument("machine", nargs="?")
    ap.add_argument("--seq", type=int, help="unit sequence number (default: clock-based)")
    ap.add_argument("--deadline", type=float, default=60.0, help="seconds before giving up")
    ap.add_argument("--json", action="store_true", help="print the raw reply as JSON")
    args = ap.parse_args(argv)
    kind = {"in": EventKind.CHECK_IN, "out": EventKind.CHECK_OUT, "claim": EventKind.CLAIM}[args.action]
    if (kind is EventKind.CLAIM) != (args.machine is not None):
        print("omams-scan: a machine is required for claim and only for claim", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ev = ScanEvent(args.unit, args.seq or time.time_ns() // 1000, kind,
                       parse_badge_code(args.badge), args.machine, now_ms())
        reply = deliver_scan(args.address, ev, deadline_s=args.deadline)
    except (ValueError, ConnectionError) as e:
        print(f"omams-scan: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(reply, sort_keys=True) if args.json else describe_reply(reply))
    return EXIT_REJECTED if reply["t"] == "reject" else EXIT_OK


# -- display -----------------------------------------------------------------


def render_board(board: DisplayBoard, workshop: Optional[str] = None) -> str:
    """Aligned-column text; ``workshop`` narrows the vacant list and queues."""
    lines = [f"as of {board.as_of}", "ALLOCATED"]
    width = max([len(m) for m, _ in board.allocated + board.vacant] + [7])
    lines += [f"  {m.ljust(width)}  {o}" for m, o in board.allocated]
    lines.append("VACANT")
    lines += [f"  {m.ljust(width)}  {w}" for m, w in board.vacant if workshop in (None, w)]
    lines.append("WAITING")
    for w, q in sorted(board.waiting.items()):
        if workshop in (None, w):
            lines.append(f"  {w}: " + (", ".join(f"{i}.{o}" for i, o in enumerate(q, 1)) or "-"))
    return "\n".join(lines) + "\n"


def omams_display(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="omams-display", description="Tail the display board.")
    ap.add_argument("address")
    ap.add_argument("--workshop", help="only show this workshop's vacant machines and queue")
    ap.add_argument("--once", action="store_true", help="print the current board and exit")
    args = ap.parse_args(argv)
    try:
        host, port = _split_addr(args.address)
        with socket.create_connection((host, port), timeout=10) as sock:
            sock.settimeout(None)
            sock.sendall(encode_frame(msg_hello("display", role="display")))
            reader = FrameReader()
            while True:
                msg = _recv_message(sock, reader)
                if msg["t"] == "board":
                    sys.stdout.write(render_board(DisplayBoard.from_dict(msg["board"]), args.workshop))
                    sys.stdout.flush()
                    if args.once:
                        return EXIT_OK
                elif msg["t"] == "notify":
                    print(f"NOTICE {msg['operator']}: {msg['text']}", flush=True)
    except (OSError, ValueError, ProtocolError) as e:
        print(f"omams-display: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_OK


# -- reports -----------------------------------------------------------------


def parse_time(text: str) -> int:
    """Milliseconds since the epoch, or an ISO-8601 timestamp (UTC if naive)."""
    if text.isdigit():
        return int(text)
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() * 1000)


def omams_report(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="omams-report", description="Reports from a journal.")
    ap.add_argument("journal")
    ap.add_argument("kind", choices=["hours", "utilization"])
    ap.add_argument("id", help="operator badge (hours) or machine id (utilization)")
    ap.add_argument("--start", help="window start, ms or ISO-8601 (default: first record)")
    ap.add_argument("--end", help="window end, ms or ISO-8601 (default: last record)")
    fmt = ap.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true")
    fmt.add_argument("--table", action="store_true", help="aligned columns instead of CSV")
    args = ap.parse_args(argv)

    path = Path(args.journal)
    if not path.is_file():
        print(f"omams-report: cannot read {path}", file=sys.stderr)
        return EXIT_CONFIG
    records, err = read_journal(path)
    if err is not None:
        print(f"omams-report: warning: {err}; using first {len(records)} records", file=sys.stderr)
        if not err.torn_tail:
            return EXIT_CORRUPT
    try:
        start = parse_time(args.start) if args.start else (records[0].central_time if records else 0)
        end = parse_time(args.end) if args.end else (records[-1].central_time if records else start)
        if args.kind == "hours":
            report = work_hours_report(records, parse_badge_code(args.id), (start, end))
        else:
            report = utilization_report(records, args.id, (start, end))
    except UnknownMachine as e:
        print(f"omams-report: unknown machine {e}", file=sys.stderr)
        return EXIT_UNKNOWN
    except ValueError as e:
        print(f"omams-report: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(report_json(report, args.kind))
    elif args.table:
        sys.stdout.write(report_table(report, args.kind))
    else:
        sys.stdout.write(report_csv(report, args.kind))
    return EXIT_OK


# -- simulator ---------------------------------------------------------------


def omams_sim(argv=None) -> int:
    from .sim import NetConfig, check_against_oracle, gen_random_scenario, load_scenario
    from .sim.scenario import InvalidScenario

    ap = argparse.ArgumentParser(prog="omams-sim", description="Simulate scenarios against the oracle.")
    ap.add_argument("scenarios", nargs="*", help="scenario JSON files")
    ap.add_argument("--random", type=int, default=0, metavar="N",
                    help="also run N generated scenarios (seeds 0..N-1)")
    ap.add_argument("--seed", type=int, default=0, help="network seed (file scenarios)")
    ap.add_argument("--drop", type=float, default=0.0)
    ap.add_argument("--dup", type=float, default=0.0)
    ap.add_argument("--delay-min", type=int, default=0, help="ms")
    ap.add_argument("--delay-max", type=int, default=0, help="ms")
    ap.add_argument("--uplink", type=int, default=42_800, help="bits per second")
    ap.add_argument("--downlink", type=int, default=85_600, help="bits per second")
    ap.add_argument("--no-retries", action="store_true")
    ap.add_argument("--trace", help="write the JSON Lines trace of the last run here")
    args = ap.parse_args(argv)
    try:
        net = NetConfig(args.drop, args.dup, args.delay_min, args.delay_max,
                        args.uplink, args.downlink, not args.no_retries)
    except ValueError as e:
        print(f"omams-sim: {e}", file=sys.stderr)
        return EXIT_CONFIG

    runs = []
    for f in args.scenarios:
        try:
            runs.append((f, load_scenario(Path(f).read_text(encoding="utf-8")), args.seed))
        except (OSError, InvalidScenario) as e:
            print(f"omams-sim: {f}: {e}", file=sys.stderr)
            return EXIT_CONFIG
    runs += [(f"random#{s}", gen_random_scenario(s), s) for s in range(args.random)]
    if not runs:
        ap.error("no scenarios given")

    failed = 0
    trace = None
    for name, sc, seed in runs:
        ok, trace, _ = check_against_oracle(sc, net, seed)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name} seed={seed} "
              f"journal={trace.journal.last_seq} done_ms={trace.completion_ms}")
    if args.trace and trace is not None:
        Path(args.trace).write_text(trace.to_jsonl(), encoding="utf-8")
    print(f"{len(runs) - failed}/{len(runs)} PASS")
    return EXIT_OK if failed == 0 else EXIT_CONFIG


COMMANDS = {
    "omamsd": omamsd,
    "omams-scan": omams_scan,
    "omams-display": omams_display,
    "omams-report": omams_report,
    "omams-sim": omams_sim,
}

if __name__ == "__main__":
    if len(sys.argv) < 2 or sys.argv[1] not in COMMANDS:
        print(f"usage: python -m omams.cli {{{','.join(COMMANDS)}}} ...", file=sys.stderr)
        sys.exit(EXIT_CONFIG)
    sys.exit(COMMANDS[sys.argv[1]](sys.argv[2:]))
