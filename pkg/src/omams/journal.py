"""Append-only journal of everything the central unit decided.

One JSON object per line, fields in fixed order: ``seq``, ``central_time``,
``event``, ``outcome``. The floor state is a fold over the Applied records,
so a journal is enough to rebuild the central unit after a crash and to
produce work-hour and utilization reports.

A reader tolerates a torn final line: decoding stops at the first line that
is incomplete or unparsable and reports it as ``CorruptRecord`` alongside the
good prefix.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .core import FloorState, OmamsError, ScanEvent, state_to_json


class JournalError(OmamsError):
    pass


class SeqGap(JournalError):
    pass


class StorageFailure(JournalError):
    pass


class CorruptRecord(JournalError):
    """``torn_tail`` is true when only the final line is bad (an interrupted write)."""

    def __init__(self, seq: int, detail: str, torn_tail: bool = False):
        super().__init__(f"corrupt journal record at seq {seq}: {detail}")
        self.seq = seq
        self.detail = detail
        self.torn_tail = torn_tail


class UnknownMachine(JournalError):
    pass


# -- records ----------------------------------------------------------------


@dataclass(frozen=True)
class AdminMark:
    """Non-scan journal entry, e.g. daemon startup with the machine table."""

    mark: str
    machines: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"admin": self.mark, "machines": dict(sorted(self.machines.items()))}


@dataclass(frozen=True)
class Applied:
    summary: Mapping


@dataclass(frozen=True)
class Rejected:
    reason: str


@dataclass(frozen=True)
class DuplicateAck:
    pass


Outcome = Union[Applied, Rejected, DuplicateAck]


@dataclass(frozen=True)
class JournalRecord:
    seq: int
    central_time: int
    event: Union[ScanEvent, AdminMark]
    outcome: Optional[Outcome] = None


def encode_record(rec: JournalRecord) -> str:
    event = rec.event.to_dict()
    if isinstance(rec.outcome, Applied):
        outcome = {"applied": rec.outcome.summary}
    elif isinstance(rec.outcome, Rejected):
        outcome = {"rejected": rec.outcome.reason}
    elif isinstance(rec.outcome, DuplicateAck):
        outcome = {"duplicate": True}
    else:
        outcome = None
    line = {"seq": rec.seq, "central_time": rec.central_time, "event": event, "outcome": outcome}
    return json.dumps(line, separators=(",", ":"), ensure_ascii=False)


def decode_record(line: str) -> JournalRecord:
    d = json.loads(line)
    if not isinstance(d, dict) or list(d) != ["seq", "central_time", "event", "outcome"]:
        raise ValueError("record fields missing or out of order")
    seq, t = d["seq"], d["central_time"]
    if not isinstance(seq, int) or not isinstance(t, int) or seq < 1 or t < 0:
        raise ValueError("bad seq/central_time")
    ev = d["event"]
    if isinstance(ev, dict) and "admin" in ev:
        event = AdminMark(ev["admin"], dict(ev.get("machines", {})))
    else:
        event = ScanEvent.from_dict(ev)
    out = d["outcome"]
    if out is None:
        outcome = None
    elif isinstance(out, dict) and "applied" in out:
        outcome = Applied(out["applied"])
    elif isinstance(out, dict) and "rejected" in out:
        outcome = Rejected(out["rejected"])
    elif isinstance(out, dict) and out.get("duplicate") is True:
        outcome = DuplicateAck()
    else:
        raise ValueError(f"unknown outcome {out!r}")
    return JournalRecord(seq, t, event, outcome)


def load_records(data: Union[bytes, str]) -> tuple[list[JournalRecord], Optional[CorruptRecord]]:
    """Decode journal text; return the valid prefix and the first problem, if any.

    A record is only accepted if its line ends with a newline, so a write
    torn anywhere inside the last line never yields a half record.
    """
    if isinstance(data, bytes):
        # a cut inside a multibyte sequence only affects the final line
        data = data.decode("utf-8", errors="replace")
    records: list[JournalRecord] = []
    last_t = 0
    lines = [ln + "\n" for ln in data.split("\n")]
    # text after the final newline is an unterminated line; "" means none
    tail = lines.pop()
    if tail != "\n":
        lines.append(tail[:-1])
    for i, line in enumerate(lines):
        seq = len(records) + 1
        last = i == len(lines) - 1
        if not line.endswith("\n"):
            return records, CorruptRecord(seq, "incomplete final line", torn_tail=True)
        if not line.strip():
            return records, CorruptRecord(seq, "blank line", torn_tail=last)
        try:
            rec = decode_record(line)
        except (ValueError, KeyError, TypeError) as e:
            return records, CorruptRecord(seq, str(e), torn_tail=last)
        if rec.seq != seq:
            return records, CorruptRecord(seq, f"found seq {rec.seq}")
        if rec.central_time < last_t:
            return records, CorruptRecord(seq, "central_time went backwards")
        last_t = rec.central_time
        records.append(rec)
    return records, None


def read_journal(path: Union[str, Path]) -> tuple[list[JournalRecord], Optional[CorruptRecord]]:
    p = Path(path)
    if not p.exists():
        return [], None
    return load_records(p.read_bytes())


class Journal:
    """Sequential journal writer, optionally backed by a file.

    ``append`` writes (and fsyncs, if asked) before returning, so callers can
    release the matching ack only afterwards.
    """

    def __init__(self, path: Union[str, Path, None] = None, *, fsync: bool = True,
                 records: Sequence[JournalRecord] = ()):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self.records: list[JournalRecord] = list(records)
        self._fh = None
        if self.path is not None:
            self._fh = open(self.path, "a", encoding="utf-8", newline="\n")

    @classmethod
    def open(cls, path: Union[str, Path], *, fsync: bool = True) -> tuple["Journal", Optional[CorruptRecord]]:
        """Open ``path`` for appending, cutting off a torn final line first.

        Corruption before the final line is raised as ``CorruptRecord``.
        """
        p = Path(path)
        records, err = read_journal(p)
        if err is not None:
            if not err.torn_tail:
                raise err
            raw = p.read_bytes()
            keep = sum(len(ln) + 1 for ln in raw.split(b"\n")[: len(records)])
            with open(p, "r+b") as fh:
                fh.truncate(keep)
        return cls(p, fsync=fsync, records=records), err

    @property
    def last_seq(self) -> int:
        return len(self.records)

    @property
    def next_seq(self) -> int:
        return len(self.records) + 1

    def append(self, record: JournalRecord) -> int:
        if record.seq != self.next_seq:
            raise SeqGap(f"expected seq {self.next_seq}, got {record.seq}")
        if self.records and record.central_time < self.records[-1].central_time:
            raise JournalError("central_time went backwards")
        if self._fh is not None:
            try:
                self._fh.write(encode_record(record) + "\n")
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            except OSError as e:
                raise StorageFailure(str(e)) from e
        self.records.append(record)
        return record.seq

    def stamp_and_append(self, record: JournalRecord) -> JournalRecord:
        rec = replace(record, seq=self.next_seq)
        self.append(rec)
        return rec

    def to_bytes(self) -> bytes:
        return dump_records(self.records)

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def dump_records(records: Iterable[JournalRecord]) -> bytes:
    return "".join(encode_record(r) + "\n" for r in records).encode("utf-8")


# -- replay -----------------------------------------------------------------


def replay(records: Sequence[JournalRecord], registry) -> FloorState:
    """Rebuild the floor state from journal records.

    Applied records are folded through the allocator, and the outcome it
    produces must match the recorded one. Rejected records only mark their
    idempotency key as consumed. ``registry`` supplies the machine table; any
    object with a ``machines`` mapping works.
    """
    from .allocator import apply_verified, mark_rejected
    from .registry import VerifiedScan

    state = FloorState.initial(registry.machines)
    expect = 1
    last_t = 0
    for rec in records:
        if rec.seq != expect:
            raise CorruptRecord(expect, f"found seq {rec.seq}")
        if rec.central_time < last_t:
            raise CorruptRecord(rec.seq, "central_time went backwards")
        expect += 1
        last_t = rec.central_time
        if isinstance(rec.event, AdminMark) or isinstance(rec.outcome, DuplicateAck):
            continue
        ev = rec.event
        if isinstance(rec.outcome, Rejected):
            state = mark_rejected(state, ev, rec.central_time)
            continue
        if not isinstance(rec.outcome, Applied):
            raise CorruptRecord(rec.seq, "scan record without outcome")
        summary = rec.outcome.summary
        workshop = summary.get("workshop", "")
        try:
            state, new_summary, _ = apply_verified(state, VerifiedScan(ev, workshop), rec.central_time)
        except OmamsError as e:
            raise CorruptRecord(rec.seq, f"replay failed: {e}") from None
        if new_summary != summary:
            raise CorruptRecord(rec.seq, f"replay diverged: {new_summary} != {summary}")
    return state


def replay_bytes(data: Union[bytes, str], registry) -> tuple[FloorState, Optional[CorruptRecord]]:
    """Replay the valid prefix of raw journal text."""
    records, err = load_records(data)
    return replay(records, registry), err


# -- reports ----------------------------------------------------------------

MS_PER_HOUR = 3_600_000


def hours(ms: int) -> str:
    return f"{ms / MS_PER_HOUR:.3f}"


@dataclass(frozen=True)
class Segment:
    who: str
    start: int
    end: int
    complete: bool = True

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass
class Report:
    subject: str
    window: tuple[int, int]
    segments: list[Segment]

    @property
    def total_ms(self) -> int:
        return sum(s.duration for s in self.segments)

    @property
    def total_hours(self) -> str:
        return hours(self.total_ms)

    @property
    def fraction(self) -> float:
        start, end = self.window
        return self.total_ms / (end - start) if end > start else 0.0


def _check_window(window):
    start, end = window
    if not (isinstance(start, int) and isinstance(end, int)) or start < 0 or end < start:
        raise ValueError(f"invalid window {window!r}")


def _clip(who, start, end, window, complete=True) -> Optional[Segment]:
    ws, we = window
    s, e = max(start, ws), min(end, we)
    if e <= s:
        return None
    return Segment(who, s, e, complete)


def _scan_records(records):
    for rec in records:
        if isinstance(rec.outcome, Applied) and isinstance(rec.event, ScanEvent):
            yield rec


def work_hours_report(records: Sequence[JournalRecord], operator: str, window) -> Report:
    """On-site sessions (check-in to check-out) of ``operator`` within ``window``.

    A session still open at the end of the journal runs to the window end and
    is marked incomplete.
    """
    _check_window(window)
    segments = []
    opened: Optional[int] = None
    for rec in _scan_records(records):
        ev = rec.event
        if ev.badge != operator:
            continue
        if ev.kind.value == "CheckIn":
            opened = rec.central_time
        elif ev.kind.value == "CheckOut" and opened is not None:
            seg = _clip(operator, opened, rec.central_time, window)
            if seg:
                segments.append(seg)
            opened = None
    if opened is not None:
        seg = _clip(operator, opened, window[1], window, complete=False)
        if seg:
            segments.append(seg)
    return Report(operator, tuple(window), segments)


def allocation_segments(records: Sequence[JournalRecord]) -> tuple[dict, dict]:
    """Machine occupancy from the machine side and the operator side.

    Returns ``(by_machine, by_operator)``; each maps an id to a list of
    ``(other_id, start, end_or_None)``. The two views are built by separate
    bookkeeping so comparing their totals is a real cross-check.
    """
    by_machine: dict[str, list] = {}
    occupant: dict[str, tuple[str, int]] = {}
    by_operator: dict[str, list] = {}
    holding: dict[str, tuple[str, int]] = {}

    def start(machine, op, t):
        occupant[machine] = (op, t)
        holding[op] = (machine, t)

    for rec in _scan_records(records):
        s = rec.outcome.summary
        t = rec.central_time
        op = rec.event.badge
        if s.get("result") == "allotted":
            start(s["machine"], op, t)
        elif s.get("result") == "checked_out":
            released = s.get("released")
            if released is not None:
                who, since = occupant.pop(released)
                by_machine.setdefault(released, []).append((who, since, t))
            if op in holding:
                m, since = holding.pop(op)
                by_operator.setdefault(op, []).append((m, since, t))
            nxt = s.get("reassigned")
            if nxt:
                start(nxt["machine"], nxt["operator"], t)
    for m, (who, since) in occupant.items():
        by_machine.setdefault(m, []).append((who, since, None))
    for op, (m, since) in holding.items():
        by_operator.setdefault(op, []).append((m, since, None))
    return by_machine, by_operator


def known_machines(records: Sequence[JournalRecord]) -> set[str]:
    seen = set()
    for rec in records:
        if isinstance(rec.event, AdminMark):
            seen.update(rec.event.machines)
        elif isinstance(rec.outcome, Applied):
            s = rec.outcome.summary
            for k in ("machine", "released"):
                if s.get(k):
                    seen.add(s[k])
        if isinstance(rec.event, ScanEvent) and rec.event.claimed_machine and isinstance(rec.outcome, Applied):
            seen.add(rec.event.claimed_machine)
    return seen


def utilization_report(records: Sequence[JournalRecord], machine: str, window,
                       machines: Optional[Iterable[str]] = None) -> Report:
    """Busy fraction of ``machine`` over ``window`` plus its allocation segments."""
    _check_window(window)
    known = set(machines) if machines is not None else known_machines(records)
    if machine not in known:
        raise UnknownMachine(machine)
    by_machine, _ = allocation_segments(records)
    segments = []
    for who, s, e in by_machine.get(machine, []):
        seg = _clip(who, s, window[1] if e is None else e, window, complete=e is not None)
        if seg:
            segments.append(seg)
    return Report(machine, tuple(window), segments)


def allocated_time_by_operator(records: Sequence[JournalRecord], window) -> dict[str, int]:
    _check_window(window)
    _, by_operator = allocation_segments(records)
    totals = {}
    for op, segs in by_operator.items():
        total = 0
        for _, s, e in segs:
            seg = _clip(op, s, window[1] if e is None else e, window)
            total += seg.duration if seg else 0
        totals[op] = total
    return totals


def report_csv(report: Report, kind: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    if kind == "hours":
        w.writerow(["operator", "start", "end", "hours", "complete"])
        for s in report.segments:
            w.writerow([report.subject, s.start, s.end, hours(s.duration), "yes" if s.complete else "no"])
        w.writerow([report.subject, report.window[0], report.window[1], report.total_hours, "total"])
    else:
        w.writerow(["machine", "operator", "start", "end", "hours", "utilization"])
        for s in report.segments:
            w.writerow([report.subject, s.who, s.start, s.end, hours(s.duration), ""])
        w.writerow([report.subject, "total", report.window[0], report.window[1], report.total_hours,
                    f"{report.fraction:.3f}"])
    return buf.getvalue()


def report_table(report: Report, kind: str) -> str:
    rows = list(csv.reader(io.StringIO(report_csv(report, kind))))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in rows) + "\n"


def report_json(report: Report, kind: str) -> str:
    d = {
        "subject": report.subject,
        "window": list(report.window),
        "segments": [
            {"who": s.who, "start": s.start, "end": s.end, "hours": hours(s.duration), "complete": s.complete}
            for s in report.segments
        ],
        "total_hours": report.total_hours,
    }
    if kind == "utilization":
        d["utilization"] = f"{report.fraction:.3f}"
    return json.dumps(d, sort_keys=True)


def canonical_state(state: FloorState) -> str:
    """Canonical text form of a floor state, used for replay comparison."""
    return state_to_json(state)
