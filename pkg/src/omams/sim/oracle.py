"""Reference oracle: the allotment procedure done the slow, obvious way.

Deliberately shares no transition code with ``omams.allocator``. Machines
are a sorted list of rows scanned front to back, and the waiting list is one
plant-wide arrival list filtered by workshop on every lookup. Scans are
applied losslessly in script order with the script time as central time.
"""

from __future__ import annotations

from ..core import Allocated, FloorState, Machine, Waiting
from .scenario import Scenario


def _find_operator(registry, badge):
    for rec in registry.operators.values():
        if rec.badge == badge:
            return rec
    return None


def oracle_run(scenario: Scenario) -> FloorState:
    reg = scenario.registry
    rows = [[mid, reg.machines[mid], None, None] for mid in sorted(reg.machines)]
    status: dict[str, tuple] = {}   # badge -> ("W", since) | ("A", machine, since)
    arrivals: list[list] = []       # [workshop, badge] in arrival order
    applied: dict[str, set] = {}
    last = 0

    timed = [(0, ev) for ev in scenario.preload] + [(e.at_ms, e.event) for e in scenario.script]
    for t, ev in timed:
        if ev.unit_seq in applied.get(ev.unit_id, set()):
            continue
        applied.setdefault(ev.unit_id, set()).add(ev.unit_seq)
        last = t
        rec = _find_operator(reg, ev.badge)
        if rec is None or not rec.active:
            continue
        badge = ev.badge
        kind = ev.kind.value

        if kind == "CheckIn":
            if badge in status:
                continue
            workshop = reg.units.get(ev.unit_id, rec.home_workshop)
            if workshop not in reg.workshops:
                continue
            for row in rows:
                if row[1] == workshop and row[2] is None:
                    row[2], row[3] = badge, t
                    status[badge] = ("A", row[0], t)
                    break
            else:
                arrivals.append([workshop, badge])
                status[badge] = ("W", t)

        elif kind == "CheckOut":
            if badge not in status:
                continue
            st = status.pop(badge)
            if st[0] == "W":
                arrivals = [a for a in arrivals if a[1] != badge]
                continue
            for row in rows:
                if row[0] == st[1]:
                    row[2], row[3] = None, None
                    for a in arrivals:
                        if a[0] == row[1]:
                            row[2], row[3] = a[1], t
                            status[a[1]] = ("A", row[0], t)
                            arrivals.remove(a)
                            break

        elif kind == "Claim":
            target = None
            for row in rows:
                if row[0] == ev.claimed_machine:
                    target = row
            if target is None:
                continue
            if badge not in status or status[badge][0] != "W":
                continue
            if target[2] is not None:
                continue
            arrivals = [a for a in arrivals if a[1] != badge]
            target[2], target[3] = badge, t
            status[badge] = ("A", target[0], t)

    operators = {}
    for badge, st in status.items():
        operators[badge] = Waiting(st[1]) if st[0] == "W" else Allocated(st[1], st[2])
    waiting: dict[str, list] = {w: [] for w in reg.workshops}
    for w, badge in arrivals:
        waiting[w].append(badge)
    return FloorState(
        machines={r[0]: Machine(r[1], r[2], r[3]) for r in rows},
        operators=operators,
        waiting={w: tuple(q) for w, q in waiting.items()},
        applied={u: frozenset(s) for u, s in applied.items()},
        last_event_time=last,
    )
