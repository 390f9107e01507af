from omams.allocator import process_scan
from omams.core import EventKind, FloorState, ScanEvent
from omams.registry import OperatorRecord, Registry
from omams.sim import Scenario, ScriptEntry

IN, OUT, CLAIM = EventKind.CHECK_IN, EventKind.CHECK_OUT, EventKind.CLAIM


def make_registry(machines, operators, units=None):
    """machines: {id: workshop}; operators: {badge: workshop} or {badge: (workshop, active)}."""
    ops = {}
    for badge, v in operators.items():
        ws, active = v if isinstance(v, tuple) else (v, True)
        ops[badge] = OperatorRecord(badge, badge.title(), ws, active)
    workshops = tuple(sorted(set(machines.values())))
    return Registry(ops, dict(machines), workshops, dict(units or {}))


class Scanner:
    """Hands out per-unit sequence numbers."""

    def __init__(self):
        self.seqs = {}

    def __call__(self, kind, badge, machine=None, unit="U1"):
        self.seqs[unit] = self.seqs.get(unit, 0) + 1
        return ScanEvent(unit, self.seqs[unit], kind, badge, machine)


def fold(registry, events, start=0, step=1000):
    state = FloorState.initial(registry.machines)
    all_effects = []
    t = start
    for ev in events:
        state, eff = process_scan(state, registry, ev, t)
        all_effects.append(eff)
        t += step
    return state, all_effects


def scenario_of(registry, events, step=1000, preload=()):
    return Scenario(registry, tuple(ScriptEntry(i * step, ev) for i, ev in enumerate(events)), tuple(preload))
