"""The central unit's allotment state machine.

Operators are served first come, first served per workshop; a checking-in
operator gets the lowest-numbered vacant machine of the workshop or joins the
back of its waiting queue. A released machine goes straight to the head of
its workshop's queue. Moving to another workshop's machine only happens
through an explicit claim.

Every function here is pure: states go in, new states and effect lists come
out. The caller owns the journal, the network and the clock.
"""

from __future__ import annotations

from typing import Optional

from .core import (
    Ack,
    Allocated,
    DisplayUpdate,
    EventKind,
    FloorState,
    JournalAppend,
    Machine,
    Notify,
    OffSite,
    OmamsError,
    Reject,
    ScanEvent,
    Waiting,
    snapshot,
)
from .journal import Applied, JournalRecord, Rejected
from .registry import Registry, Unauthorized, VerifiedScan, verify_scan


class ClockRegression(OmamsError):
    pass


class Rejection(OmamsError):
    """A scan that is valid on the wire but not allowed in the current state."""

    @property
    def reason(self) -> str:
        return type(self).__name__


class AlreadyPresent(Rejection):
    pass


class NotPresent(Rejection):
    pass


class NotWaiting(Rejection):
    pass


class ClaimConflict(Rejection):
    pass


class UnknownMachine(Rejection):
    pass


class UnknownWorkshop(Rejection):
    pass


def pick_machine(state: FloorState, workshop: str) -> Optional[str]:
    free = [mid for mid, m in state.machines.items() if m.workshop == workshop and m.vacant]
    return min(free) if free else None


def _evolve(state, machines=None, operators=None, waiting=None) -> FloorState:
    return FloorState(
        machines=state.machines if machines is None else machines,
        operators=state.operators if operators is None else operators,
        waiting=state.waiting if waiting is None else waiting,
        applied=state.applied,
        last_event_time=state.last_event_time,
    )


def handle_check_in(state: FloorState, operator: str, workshop: str, now: int):
    """Allot a machine to ``operator`` in ``workshop`` or queue them.

    Returns ``(new_state, summary)``.
    """
    if not isinstance(state.status_of(operator), OffSite):
        raise AlreadyPresent(operator)
    if workshop not in state.waiting:
        raise UnknownWorkshop(workshop)
    operators = dict(state.operators)
    mid = pick_machine(state, workshop)
    if mid is None:
        queue = state.waiting[workshop] + (operator,)
        operators[operator] = Waiting(now)
        waiting = dict(state.waiting)
        waiting[workshop] = queue
        summary = {"result": "waiting", "workshop": workshop, "position": len(queue)}
        return _evolve(state, operators=operators, waiting=waiting), summary
    machines = dict(state.machines)
    machines[mid] = Machine(workshop, operator, now)
    operators[operator] = Allocated(mid, now)
    summary = {"result": "allotted", "workshop": workshop, "machine": mid}
    return _evolve(state, machines=machines, operators=operators), summary


def handle_check_out(state: FloorState, operator: str, now: int):
    st = state.status_of(operator)
    summary = {"result": "checked_out", "released": None, "reassigned": None, "left_queue": None}
    operators = dict(state.operators)
    operators.pop(operator, None)
    if isinstance(st, OffSite):
        raise NotPresent(operator)
    if isinstance(st, Waiting):
        waiting = dict(state.waiting)
        for w, q in state.waiting.items():
            if operator in q:
                waiting[w] = tuple(o for o in q if o != operator)
                summary["left_queue"] = w
        return _evolve(state, operators=operators, waiting=waiting), summary

    mid = st.machine
    ws = state.machines[mid].workshop
    machines = dict(state.machines)
    summary["released"] = mid
    queue = state.waiting[ws]
    if queue:
        nxt = queue[0]
        machines[mid] = Machine(ws, nxt, now)
        operators[nxt] = Allocated(mid, now)
        waiting = dict(state.waiting)
        waiting[ws] = queue[1:]
        summary["reassigned"] = {"machine": mid, "operator": nxt}
        return _evolve(state, machines=machines, operators=operators, waiting=waiting), summary
    machines[mid] = Machine(ws)
    return _evolve(state, machines=machines, operators=operators), summary


def handle_claim(state: FloorState, operator: str, machine: str, now: int):
    m = state.machines.get(machine)
    if m is None:
        raise UnknownMachine(machine)
    if not isinstance(state.status_of(operator), Waiting):
        raise NotWaiting(operator)
    if not m.vacant:
        raise ClaimConflict(machine)
    waiting = dict(state.waiting)
    left = None
    for w, q in state.waiting.items():
        if operator in q:
            waiting[w] = tuple(o for o in q if o != operator)
            left = w
    machines = dict(state.machines)
    machines[machine] = Machine(m.workshop, operator, now)
    operators = dict(state.operators)
    operators[operator] = Allocated(machine, now)
    summary = {"result": "allotted", "machine": machine, "claimed": True, "left_queue": left}
    return _evolve(state, machines=machines, operators=operators, waiting=waiting), summary


def _record_key(state: FloorState, ev: ScanEvent, now: int) -> FloorState:
    applied = dict(state.applied)
    applied[ev.unit_id] = state.applied.get(ev.unit_id, frozenset()) | {ev.unit_seq}
    return FloorState(
        machines=state.machines,
        operators=state.operators,
        waiting=state.waiting,
        applied=applied,
        last_event_time=now,
    )


def _check_clock(state: FloorState, now: int):
    if now < state.last_event_time:
        raise ClockRegression(f"now={now} < last_event_time={state.last_event_time}")


def apply_verified(state: FloorState, scan: VerifiedScan, now: int):
    """Run the kind-specific handler and record the idempotency key.

    Returns ``(new_state, summary, notifies)``; raises ``Rejection`` with the
    input state untouched.
    """
    _check_clock(state, now)
    ev = scan.event
    op = ev.badge
    if ev.kind is EventKind.CHECK_IN:
        new, summary = handle_check_in(state, op, scan.workshop, now)
    elif ev.kind is EventKind.CHECK_OUT:
        new, summary = handle_check_out(state, op, now)
    else:
        new, summary = handle_claim(state, op, ev.claimed_machine, now)
    notifies = [
        Notify(o, f"{o}: please proceed to machine {st.machine}")
        for o, st in sorted(new.operators.items())
        if isinstance(st, Allocated) and state.operators.get(o) != st
    ]
    return _record_key(new, ev, now), summary, notifies


def mark_rejected(state: FloorState, ev: ScanEvent, now: int) -> FloorState:
    """Consume the idempotency key of a rejected scan without other changes."""
    _check_clock(state, now)
    return _record_key(state, ev, now)


def reject(state: FloorState, ev: ScanEvent, now: int, reason: str):
    new = mark_rejected(state, ev, now)
    rec = JournalRecord(0, now, ev, Rejected(reason))
    return new, [JournalAppend(rec), Reject(ev.unit_id, ev.unit_seq, reason)]


def apply_event(state: FloorState, scan: VerifiedScan, now: int):
    """Apply one verified scan; return ``(new_state, effects)``.

    A scan whose key was already applied is re-acknowledged and nothing
    else. Rejections are journaled for audit and answered with ``Reject``.
    """
    _check_clock(state, now)
    ev = scan.event
    if state.is_applied(ev.unit_id, ev.unit_seq):
        return state, [Ack(ev.unit_id, ev.unit_seq)]
    try:
        new, summary, notifies = apply_verified(state, scan, now)
    except Rejection as r:
        return reject(state, ev, now, r.reason)
    rec = JournalRecord(0, now, ev, Applied(summary))
    effects = [
        JournalAppend(rec),
        Ack(ev.unit_id, ev.unit_seq, summary),
        DisplayUpdate(snapshot(new)),
        *notifies,
    ]
    return new, effects


def process_scan(state: FloorState, registry: Registry, ev: ScanEvent, now: int):
    """Verify the badge, then apply. Unauthorized scans are rejected and audited."""
    _check_clock(state, now)
    if state.is_applied(ev.unit_id, ev.unit_seq):
        return state, [Ack(ev.unit_id, ev.unit_seq)]
    try:
        scan = verify_scan(registry, ev)
    except Unauthorized as u:
        return reject(state, ev, now, f"Unauthorized:{u.reason}")
    return apply_event(state, scan, now)
