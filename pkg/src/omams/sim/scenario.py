"""Scenarios: a registry plus a timed script of badge scans.

Scenario file (UTF-8 JSON)::

    {
      "registry": {...registry document...},
      "preload":  [{"unit": "PRELOAD", "kind": "CheckIn", "badge": "A24564"}, ...],
      "script":   [{"at_ms": 0, "unit": "U1", "kind": "CheckIn", "badge": "B11111"},
                   {"at_ms": 500, "unit": "U1", "kind": "Claim", "badge": "B11111", "machine": "M07"}],
      "duration_ms": 60000
    }

``preload`` scans are applied losslessly before simulated time starts; they
describe the floor as the previous shift left it. ``unit_seq`` is numbered
per unit in file order unless a ``seq`` is given.

All pseudo-randomness goes through ``random.Random(seed)`` (MT19937) and only
its ``random()`` method, mapped to integers by ``_randint``, so scenarios are
reproducible from the seed alone.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import Mapping, Sequence

from ..core import EventKind, OmamsError, ScanEvent
from ..registry import OperatorRecord, Registry, registry_from_dict


class InvalidScenario(OmamsError):
    pass


class InvalidCounts(InvalidScenario):
    pass


@dataclass(frozen=True)
class ScriptEntry:
    at_ms: int
    event: ScanEvent


@dataclass(frozen=True)
class Scenario:
    registry: Registry
    script: tuple[ScriptEntry, ...]
    preload: tuple[ScanEvent, ...] = ()
    duration_ms: int = 0

    def __post_init__(self):
        last_seq: dict[str, int] = {}
        keys = set()
        for ev in self.preload:
            if ev.key in keys:
                raise InvalidScenario(f"duplicate key {ev.key}")
            keys.add(ev.key)
        last_t = 0
        for e in self.script:
            if e.at_ms < last_t:
                raise InvalidScenario("script must be ordered by at_ms")
            last_t = e.at_ms
            u = e.event.unit_id
            if e.event.unit_seq <= last_seq.get(u, 0):
                raise InvalidScenario(f"unit {u}: unit_seq not strictly increasing")
            last_seq[u] = e.event.unit_seq
            if e.event.key in keys:
                raise InvalidScenario(f"duplicate key {e.event.key}")
            keys.add(e.event.key)
        if self.preload and {ev.unit_id for ev in self.preload} & set(last_seq):
            raise InvalidScenario("preload and script must use different units")

    @property
    def units(self) -> list[str]:
        return sorted({e.event.unit_id for e in self.script})

    def to_dict(self) -> dict:
        def entry(ev: ScanEvent) -> dict:
            d = {"unit": ev.unit_id, "seq": ev.unit_seq, "kind": ev.kind.value, "badge": ev.badge}
            if ev.claimed_machine is not None:
                d["machine"] = ev.claimed_machine
            return d

        return {
            "registry": self.registry.to_dict(),
            "preload": [entry(ev) for ev in self.preload],
            "script": [{"at_ms": e.at_ms, **entry(e.event)} for e in self.script],
            "duration_ms": self.duration_ms,
        }


def _events(items: Sequence[Mapping], timed: bool):
    seqs: dict[str, int] = {}
    out = []
    for i, it in enumerate(items):
        try:
            unit = it["unit"]
            seq = it.get("seq", seqs.get(unit, 0) + 1)
            seqs[unit] = seq
            ev = ScanEvent(unit, seq, it["kind"], it["badge"], it.get("machine"),
                           it.get("at_ms", 0) if timed else 0)
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidScenario(f"entry {i}: {e}") from None
        out.append(ScriptEntry(it["at_ms"], ev) if timed else ev)
    return out


def scenario_from_dict(doc: Mapping) -> Scenario:
    try:
        reg = registry_from_dict(doc["registry"])
        script = _events(doc.get("script", []), timed=True)
        preload = _events(doc.get("preload", []), timed=False)
    except KeyError as e:
        raise InvalidScenario(f"missing {e.args[0]!r}") from None
    except OmamsError as e:
        if isinstance(e, InvalidScenario):
            raise
        raise InvalidScenario(str(e)) from None
    return Scenario(reg, tuple(script), tuple(preload), doc.get("duration_ms", 0))


def load_scenario(source) -> Scenario:
    if hasattr(source, "read"):
        source = source.read()
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as e:
        raise InvalidScenario(f"not JSON: {e}") from None
    return scenario_from_dict(doc)


def _randint(rng: random.Random, lo: int, hi: int) -> int:
    """Uniform integer in [lo, hi] from one ``rng.random()`` draw."""
    return lo + int(rng.random() * (hi - lo + 1))


def _machine_ids(n: int, prefix: str = "M", start: int = 1) -> list[str]:
    width = max(2, len(str(start + n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(start, start + n)]


def gen_shift_change(machines: int, incoming: int, outgoing: int, seed: int, *,
                     gap_ms: tuple[int, int] = (500, 3000)) -> Scenario:
    """A single-workshop shift change.

    ``outgoing`` operators hold machines from the previous shift (preloaded)
    and scan out at unit ``OUT-W1``; ``incoming`` operators scan in at
    ``IN-W1``. The two streams are interleaved by ``seed`` with gaps drawn
    from ``gap_ms``.
    """
    if min(machines, incoming, outgoing) < 0 or outgoing > machines or machines < 1:
        raise InvalidCounts(f"machines={machines} incoming={incoming} outgoing={outgoing}")
    rng = random.Random(seed)
    mids = _machine_ids(machines)
    out_ops = [f"OUT{i:04d}" for i in range(1, outgoing + 1)]
    in_ops = [f"IN{i:04d}" for i in range(1, incoming + 1)]
    reg = Registry(
        operators={b: OperatorRecord(b, b.title(), "W1") for b in out_ops + in_ops},
        machines={m: "W1" for m in mids},
        workshops=("W1",),
        units={"IN-W1": "W1", "OUT-W1": "W1"},
    )

    preload = tuple(ScanEvent("PRELOAD", i + 1, EventKind.CHECK_IN, b) for i, b in enumerate(out_ops))
    kinds = ["in"] * incoming + ["out"] * outgoing
    # Fisher-Yates on random() only, so the permutation is pinned to MT19937 output
    for i in range(len(kinds) - 1, 0, -1):
        j = _randint(rng, 0, i)
        kinds[i], kinds[j] = kinds[j], kinds[i]
    leaving = list(out_ops)
    arriving = list(in_ops)
    script = []
    t = 0
    seq = {"IN-W1": 0, "OUT-W1": 0}
    for k in kinds:
        t += _randint(rng, *gap_ms)
        if k == "in":
            unit, kind, badge = "IN-W1", EventKind.CHECK_IN, arriving.pop(0)
        else:
            unit, kind = "OUT-W1", EventKind.CHECK_OUT
            badge = leaving.pop(_randint(rng, 0, len(leaving) - 1))
        seq[unit] += 1
        script.append(ScriptEntry(t, ScanEvent(unit, seq[unit], kind, badge, unit_time=t)))
    return Scenario(reg, tuple(script), preload, t)


def gen_random_scenario(seed: int, *, max_operators: int = 50, max_machines: int = 20,
                        workshops: int = 2, max_events: int = 120) -> Scenario:
    """Random shop-floor traffic whose outcome does not depend on delivery timing.

    Each workshop has one scan unit, so its scans reach the central unit in
    script order (units are stop-and-wait). One workshop is "busy" and may
    overflow; the rest are "spare": they have fewer operators than machines,
    so their own operators only ever occupy the lowest-numbered machines. Busy
    operators may claim only the spare workshops' top machines. Under those
    rules the interleaving between workshops cannot change any decision,
    which is what lets a lossy, reordering network be compared with the
    in-order oracle. Noise scans (unknown or inactive badges, double
    check-ins, stray check-outs, claims on unknown machines) are mixed in.
    """
    if workshops < 2 or max_machines < workshops or max_operators < workshops:
        raise InvalidCounts("need at least two workshops with one machine and operator each")
    rng = random.Random(seed)
    ws = [f"W{i + 1}" for i in range(workshops)]
    busy = ws[_randint(rng, 0, workshops - 1)]

    n_machines = _randint(rng, workshops + 1, max_machines)
    counts = [1] * workshops
    for _ in range(n_machines - workshops):
        counts[_randint(rng, 0, workshops - 1)] += 1

    machines: dict[str, str] = {}
    by_ws: dict[str, list[str]] = {}
    for w, c in zip(ws, counts):
        ids = _machine_ids(c, prefix=f"{w}M")
        by_ws[w] = ids
        machines.update({m: w for m in ids})

    budget = max_operators - 2  # two inactive badges below
    own: dict[str, list[str]] = {}
    claimable: list[str] = []
    for w in ws:
        m = len(by_ws[w])
        if w == busy:
            n = _randint(rng, 1, max(1, min(budget - (workshops - 1), 2 * m + 3)))
        else:
            n = _randint(rng, 0, min(m - 1, budget))
            claimable += by_ws[w][n:]
        n = max(0, min(n, budget))
        budget -= n
        own[w] = [f"{w}OP{i:03d}" for i in range(1, n + 1)]

    ops = {b: OperatorRecord(b, b.title(), w) for w in ws for b in own[w]}
    inactive = ["XINACT01", "XINACT02"]
    for b in inactive:
        ops[b] = OperatorRecord(b, "Former", busy, active=False)
    units = {f"U-{w}": w for w in ws}
    reg = Registry(ops, machines, tuple(ws), units)

    n_events = _randint(rng, 10, max_events)
    streams: list[list[tuple[int, ScanEvent]]] = []
    per_ws = [n_events // workshops] * workshops
    for i in range(n_events % workshops):
        per_ws[i] += 1
    for w, n in zip(ws, per_ws):
        unit = f"U-{w}"
        present: set[str] = set()
        t = 0
        stream = []
        for seq in range(1, n + 1):
            t += _randint(rng, 0, 3000)
            r = rng.random()
            claim_machine = None
            if not own[w] or r < 0.05:
                badge = inactive[_randint(rng, 0, 1)] if rng.random() < 0.5 else "ZZ9999"
                kind = EventKind.CHECK_IN
            else:
                badge = own[w][_randint(rng, 0, len(own[w]) - 1)]
                r2 = rng.random()
                if badge not in present:
                    kind = EventKind.CHECK_IN if r2 < 0.93 else EventKind.CHECK_OUT
                elif w == busy and r2 < 0.3 and claimable:
                    kind = EventKind.CLAIM
                    claim_machine = claimable[_randint(rng, 0, len(claimable) - 1)]
                elif w == busy and r2 < 0.33:
                    kind, claim_machine = EventKind.CLAIM, "NOSUCHM"
                elif r2 < 0.4:
                    kind = EventKind.CHECK_IN
                else:
                    kind = EventKind.CHECK_OUT
                if kind is EventKind.CHECK_IN:
                    present.add(badge)
                elif kind is EventKind.CHECK_OUT:
                    present.discard(badge)
            stream.append((t, ScanEvent(unit, seq, kind, badge, claim_machine, unit_time=t)))
        streams.append(stream)
    merged = sorted(
        ((t, i, ev) for i, s in enumerate(streams) for t, ev in s), key=lambda x: (x[0], x[1])
    )
    script = tuple(ScriptEntry(t, ev) for t, _, ev in merged)
    return Scenario(reg, script, (), merged[-1][0] if merged else 0)
