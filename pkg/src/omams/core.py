"""Shared vocabulary for the allocation service.

Everything here is an immutable value. ``FloorState`` is the central unit's
authoritative picture of the shop floor; the allocator produces new states
rather than mutating old ones, so a state can be published to readers (display
boards, reports) without copying or locking.

Operators that are off site are simply absent from ``FloorState.operators``;
``status_of`` fills in ``OFF_SITE`` for them. Normalizing this way keeps two
states that describe the same floor equal under ``==``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Union

BADGE_RE = re.compile(r"[A-Z0-9]{4,12}")


class OmamsError(Exception):
    """Base class for every error raised by this package."""


class BadgeFormat(OmamsError, ValueError):
    pass


class InvalidEvent(OmamsError, ValueError):
    pass


def parse_badge_code(raw: str) -> str:
    """Normalize a raw RFID read to a badge code.

    >>> parse_badge_code("a24564")
    'A24564'
    """
    if not isinstance(raw, str):
        raise BadgeFormat(f"badge must be text, got {type(raw).__name__}")
    code = raw.upper()
    if not BADGE_RE.fullmatch(code):
        raise BadgeFormat(f"invalid badge code {raw!r}")
    return code


class EventKind(str, Enum):
    CHECK_IN = "CheckIn"
    CHECK_OUT = "CheckOut"
    CLAIM = "Claim"


@dataclass(frozen=True)
class ScanEvent:
    """One badge scan reported by a scan unit.

    ``(unit_id, unit_seq)`` is the idempotency key. ``unit_time`` comes from
    the unit's own clock and is kept for audit only.
    """

    unit_id: str
    unit_seq: int
    kind: EventKind
    badge: str
    claimed_machine: Optional[str] = None
    unit_time: int = 0

    def __post_init__(self):
        if not isinstance(self.unit_id, str) or not self.unit_id:
            raise InvalidEvent("unit_id must be nonempty text")
        if isinstance(self.unit_seq, bool) or not isinstance(self.unit_seq, int) or self.unit_seq < 1:
            raise InvalidEvent(f"unit_seq must be a positive integer, got {self.unit_seq!r}")
        try:
            kind = EventKind(self.kind)
        except ValueError:
            raise InvalidEvent(f"unknown event kind {self.kind!r}") from None
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "badge", parse_badge_code(self.badge))
        if (kind is EventKind.CLAIM) != (self.claimed_machine is not None):
            raise InvalidEvent("claimed_machine must be present exactly for Claim events")
        if self.claimed_machine is not None and (
            not isinstance(self.claimed_machine, str) or not self.claimed_machine
        ):
            raise InvalidEvent("claimed_machine must be nonempty text")
        if isinstance(self.unit_time, bool) or not isinstance(self.unit_time, int) or self.unit_time < 0:
            raise InvalidEvent("unit_time must be a non-negative integer")

    @property
    def key(self) -> tuple[str, int]:
        return (self.unit_id, self.unit_seq)

    def to_dict(self) -> dict:
        d = {
            "unit_id": self.unit_id,
            "unit_seq": self.unit_seq,
            "kind": self.kind.value,
            "badge": self.badge,
        }
        if self.claimed_machine is not None:
            d["machine"] = self.claimed_machine
        d["unit_time"] = self.unit_time
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScanEvent":
        if not isinstance(d, Mapping):
            raise InvalidEvent("scan event must be an object")
        extra = set(d) - {"unit_id", "unit_seq", "kind", "badge", "machine", "unit_time"}
        if extra:
            raise InvalidEvent(f"unexpected event fields {sorted(extra)}")
        try:
            return cls(
                unit_id=d["unit_id"],
                unit_seq=d["unit_seq"],
                kind=d["kind"],
                badge=d["badge"],
                claimed_machine=d.get("machine"),
                unit_time=d.get("unit_time", 0),
            )
        except KeyError as e:
            raise InvalidEvent(f"missing event field {e.args[0]!r}") from None


# -- statuses ---------------------------------------------------------------


@dataclass(frozen=True)
class OffSite:
    pass


@dataclass(frozen=True)
class Waiting:
    since: int


@dataclass(frozen=True)
class Allocated:
    machine: str
    since: int


OperatorStatus = Union[OffSite, Waiting, Allocated]
OFF_SITE = OffSite()


@dataclass(frozen=True)
class Machine:
    """A machine slot: its workshop plus the current occupant, if any."""

    workshop: str
    operator: Optional[str] = None
    since: Optional[int] = None

    @property
    def vacant(self) -> bool:
        return self.operator is None


@dataclass(frozen=True)
class FloorState:
    machines: Mapping[str, Machine]
    operators: Mapping[str, OperatorStatus] = field(default_factory=dict)
    waiting: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    applied: Mapping[str, frozenset[int]] = field(default_factory=dict)
    last_event_time: int = 0

    def __post_init__(self):
        ops = {k: v for k, v in self.operators.items() if not isinstance(v, OffSite)}
        object.__setattr__(self, "operators", ops)
        # every workshop with machines has a (possibly empty) queue
        queues = {m.workshop: () for m in self.machines.values()}
        queues.update({w: tuple(q) for w, q in self.waiting.items()})
        object.__setattr__(self, "waiting", queues)
        object.__setattr__(
            self, "applied", {u: frozenset(s) for u, s in self.applied.items() if s}
        )

    @classmethod
    def initial(cls, machines: Mapping[str, str]) -> "FloorState":
        """All machines vacant; ``machines`` maps machine id to workshop id."""
        return cls(machines={m: Machine(w) for m, w in machines.items()})

    def status_of(self, operator: str) -> OperatorStatus:
        return self.operators.get(operator, OFF_SITE)

    def is_applied(self, unit_id: str, unit_seq: int) -> bool:
        return unit_seq in self.applied.get(unit_id, ())

    @property
    def workshops(self) -> list[str]:
        return sorted(self.waiting)


# -- effects ----------------------------------------------------------------


@dataclass(frozen=True)
class DisplayBoard:
    allocated: tuple[tuple[str, str], ...]
    vacant: tuple[tuple[str, str], ...]
    waiting: Mapping[str, tuple[str, ...]]
    as_of: int

    def to_dict(self) -> dict:
        return {
            "allocated": [list(p) for p in self.allocated],
            "vacant": [list(p) for p in self.vacant],
            "waiting": {w: list(q) for w, q in sorted(self.waiting.items())},
            "as_of": self.as_of,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DisplayBoard":
        return cls(
            allocated=tuple((m, o) for m, o in d["allocated"]),
            vacant=tuple((m, w) for m, w in d["vacant"]),
            waiting={w: tuple(q) for w, q in d["waiting"].items()},
            as_of=d["as_of"],
        )

    def canonical(self) -> str:
        return canonical_json(self.to_dict())


def snapshot(state: FloorState) -> DisplayBoard:
    """Build the display board for ``state``. Pure."""
    allocated = []
    vacant = []
    for mid in sorted(state.machines):
        m = state.machines[mid]
        if m.vacant:
            vacant.append((mid, m.workshop))
        else:
            allocated.append((mid, m.operator))
    return DisplayBoard(
        allocated=tuple(allocated),
        vacant=tuple(vacant),
        waiting={w: state.waiting[w] for w in sorted(state.waiting)},
        as_of=state.last_event_time,
    )


@dataclass(frozen=True)
class JournalAppend:
    record: "object"  # journal.JournalRecord; seq is stamped by the writer


@dataclass(frozen=True)
class DisplayUpdate:
    board: DisplayBoard


@dataclass(frozen=True)
class Notify:
    operator: str
    text: str


@dataclass(frozen=True)
class Ack:
    unit_id: str
    unit_seq: int
    result: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class Reject:
    unit_id: str
    unit_seq: int
    reason: str


Effect = Union[JournalAppend, DisplayUpdate, Notify, Ack, Reject]


# -- canonical serialization ------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _status_to_dict(st: OperatorStatus) -> dict:
    if isinstance(st, Waiting):
        return {"status": "Waiting", "since": st.since}
    if isinstance(st, Allocated):
        return {"status": "Allocated", "machine": st.machine, "since": st.since}
    return {"status": "OffSite"}


def state_to_dict(state: FloorState, *, timestamps: bool = True) -> dict:
    """Plain-data form of ``state``.

    With ``timestamps=False`` every clock-derived field is dropped, leaving
    only who holds what, who waits where, and which scans were applied.
    """
    machines = {}
    for mid, m in state.machines.items():
        d = {"workshop": m.workshop, "operator": m.operator}
        if timestamps:
            d["since"] = m.since
        machines[mid] = d
    operators = {}
    for op, st in state.operators.items():
        d = _status_to_dict(st)
        if not timestamps:
            d.pop("since", None)
        operators[op] = d
    out = {
        "machines": machines,
        "operators": operators,
        "waiting": {w: list(q) for w, q in state.waiting.items()},
        "applied": {u: sorted(s) for u, s in state.applied.items()},
    }
    if timestamps:
        out["last_event_time"] = state.last_event_time
    return out


def state_to_json(state: FloorState, *, timestamps: bool = True) -> str:
    return canonical_json(state_to_dict(state, timestamps=timestamps))


def state_from_dict(d: Mapping) -> FloorState:
    machines = {
        mid: Machine(m["workshop"], m["operator"], m.get("since"))
        for mid, m in d["machines"].items()
    }
    operators: dict[str, OperatorStatus] = {}
    for op, s in d["operators"].items():
        if s["status"] == "Waiting":
            operators[op] = Waiting(s["since"])
        elif s["status"] == "Allocated":
            operators[op] = Allocated(s["machine"], s["since"])
    return FloorState(
        machines=machines,
        operators=operators,
        waiting={w: tuple(q) for w, q in d["waiting"].items()},
        applied={u: frozenset(s) for u, s in d["applied"].items()},
        last_event_time=d.get("last_event_time", 0),
    )


# -- invariant checking -----------------------------------------------------


def check_floor_invariants(state: FloorState) -> list[str]:
    """Return a description of every invariant ``state`` violates."""
    problems = []
    holders: dict[str, list[str]] = {}
    for mid in sorted(state.machines):
        m = state.machines[mid]
        if m.workshop not in state.waiting:
            problems.append(f"machine {mid}: workshop {m.workshop} has no queue")
        if m.vacant:
            if m.since is not None:
                problems.append(f"machine {mid}: vacant but has a since time")
            continue
        holders.setdefault(m.operator, []).append(mid)
        st = state.status_of(m.operator)
        if not (isinstance(st, Allocated) and st.machine == mid):
            problems.append(
                f"bijection: machine {mid} allocated to {m.operator} whose status is {st}"
            )
        elif st.since != m.since:
            problems.append(f"bijection: machine {mid} and {m.operator} disagree on since")
    for op, mids in sorted(holders.items()):
        if len(mids) > 1:
            problems.append(f"exclusivity: operator {op} holds {mids}")

    n_alloc = sum(1 for m in state.machines.values() if not m.vacant)
    n_vacant = sum(1 for m in state.machines.values() if m.vacant)
    if n_alloc + n_vacant != len(state.machines):
        problems.append("conservation: allocated + vacant != machines")

    queued: dict[str, list[str]] = {}
    for w, q in state.waiting.items():
        for op in q:
            queued.setdefault(op, []).append(w)
        if len(set(q)) != len(q):
            problems.append(f"queue consistency: duplicate entries in queue {w}")
    for op in sorted(state.operators):
        st = state.operators[op]
        if isinstance(st, Allocated):
            m = state.machines.get(st.machine)
            if m is None:
                problems.append(f"bijection: {op} allocated to unknown machine {st.machine}")
            elif m.operator != op:
                problems.append(
                    f"bijection: {op} allocated to {st.machine} which holds {m.operator}"
                )
            if op in queued:
                problems.append(f"queue consistency: allocated {op} is queued")
        elif isinstance(st, Waiting):
            ws = queued.get(op, [])
            if len(ws) != 1:
                problems.append(f"queue consistency: waiting {op} is in queues {ws}")
    for op in sorted(queued):
        if not isinstance(state.status_of(op), Waiting):
            problems.append(f"queue consistency: {op} queued but status {state.status_of(op)}")

    for w in sorted(state.waiting):
        if not state.waiting[w]:
            continue
        free = sorted(mid for mid, m in state.machines.items() if m.workshop == w and m.vacant)
        if free:
            problems.append(
                f"quiescent matching: workshop {w} has waiting {state.waiting[w][0]} "
                f"and vacant {free[0]}"
            )
    return problems
