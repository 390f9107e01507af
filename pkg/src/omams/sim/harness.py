"""Discrete-event simulation of scan units, a GPRS-like link and the central unit.

Time is virtual and kept in integer microseconds. The uplink (units to
central) and downlink (central to units) are each one shared channel: a frame
occupies its channel for ``bytes * 8 / rate`` and frames queue behind each
other. After serialization a frame may be dropped, duplicated, or delayed by
a uniform random propagation delay; each copy is dropped and delayed
independently.

Scan units are stop-and-wait: a unit keeps one scan in flight, retransmits
it with exponential backoff until the matching ack or reject arrives, then
moves on to the next scripted scan. Display-board traffic to the display
units is not put on the simulated link.

Randomness comes from one ``random.Random(seed)`` (MT19937), consumed only
through ``random()`` in a fixed order, so a run is a pure function of
(scenario, net config, seed).
"""

from __future__ import annotations

import heapq
import json
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from ..central import CentralUnit
from ..core import FloorState, ScanEvent, check_floor_invariants, state_to_dict, state_to_json
from ..journal import Journal, encode_record
from ..protocol import FrameReader, backoff_ms, encode_frame, msg_scan
from .oracle import oracle_run
from .scenario import InvalidScenario, Scenario

US_PER_MS = 1_000
DEFAULT_TIME_LIMIT_MS = 24 * 3_600_000


@dataclass(frozen=True)
class NetConfig:
    drop_prob: float = 0.0
    dup_prob: float = 0.0
    delay_min_ms: int = 0
    delay_max_ms: int = 0
    uplink_bps: int = 42_800
    downlink_bps: int = 85_600
    retries: bool = True

    def __post_init__(self):
        if not (0.0 <= self.drop_prob <= 1.0 and 0.0 <= self.dup_prob <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if not (0 <= self.delay_min_ms <= self.delay_max_ms):
            raise ValueError("need 0 <= delay_min_ms <= delay_max_ms")
        if self.uplink_bps <= 0 or self.downlink_bps <= 0:
            raise ValueError("link rates must be positive")


@dataclass
class SimTrace:
    entries: list = field(default_factory=list)
    final_state: Optional[FloorState] = None
    journal: Optional[Journal] = None
    live_states: list[str] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    converged: bool = False
    completion_ms: int = 0
    uplink_bytes: int = 0
    uplink_busy_us: int = 0
    downlink_bytes: int = 0
    downlink_busy_us: int = 0
    scan_frame_sizes: list[int] = field(default_factory=list)
    replies: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [json.dumps(e, separators=(",", ":")) for e in self.entries]
        lines += [encode_record(r) for r in self.journal.records]
        lines.append(state_to_json(self.final_state))
        return "\n".join(lines) + "\n"


class _Link:
    def __init__(self, name: str, rate_bps: int, net: NetConfig, rng: random.Random, trace: SimTrace):
        self.name = name
        self.rate = rate_bps
        self.net = net
        self.rng = rng
        self.trace = trace
        self.free_at = 0
        self.bytes = 0
        self.busy_us = 0

    def transmit(self, now: int, frame: bytes) -> list[int]:
        """Put ``frame`` on the channel; return arrival times of surviving copies."""
        ser = -(-len(frame) * 8 * 1_000_000 // self.rate)  # ceil, in us
        start = max(now, self.free_at)
        end = start + ser
        self.free_at = end
        self.bytes += len(frame)
        self.busy_us += ser
        copies = 2 if self.rng.random() < self.net.dup_prob else 1
        if copies == 2:
            self.trace.entries.append([now, self.name, "dup"])
        arrivals = []
        for _ in range(copies):
            dropped = self.rng.random() < self.net.drop_prob
            lo, hi = self.net.delay_min_ms, self.net.delay_max_ms
            delay = lo + int(self.rng.random() * (hi - lo + 1))
            if dropped:
                self.trace.entries.append([now, self.name, "drop"])
            else:
                arrivals.append(end + delay * US_PER_MS)
        return arrivals


class _Unit:
    def __init__(self, unit_id: str):
        self.unit_id = unit_id
        self.pending: deque[ScanEvent] = deque()
        self.inflight: Optional[ScanEvent] = None
        self.frame = b""
        self.attempt = 0
        self.reader = FrameReader()


def run_scenario(scenario: Scenario, net: NetConfig, seed: int, *, resend_each: int = 0,
                 check_invariants: bool = False, record_states: bool = False,
                 time_limit_ms: int = DEFAULT_TIME_LIMIT_MS) -> SimTrace:
    """Simulate ``scenario`` over a lossy link.

    ``resend_each`` makes every unit transmit each scan that many extra
    times regardless of acks, to exercise duplicate handling on purpose.
    """
    if not isinstance(scenario, Scenario):
        raise InvalidScenario("not a Scenario")
    rng = random.Random(seed)
    trace = SimTrace()
    central = CentralUnit(scenario.registry, Journal())
    central.mark("startup", 0)
    uplink = _Link("up", net.uplink_bps, net, rng, trace)
    downlink = _Link("down", net.downlink_bps, net, rng, trace)
    units = {u: _Unit(u) for u in scenario.units}
    total = len(scenario.script)

    queue: list = []
    counter = 0

    def schedule(t, kind, *data):
        nonlocal counter
        counter += 1
        heapq.heappush(queue, (t, counter, kind, data))

    def after_central_step():
        if check_invariants:
            for v in check_floor_invariants(central.state):
                trace.violations.append(f"t={central.state.last_event_time}: {v}")
        if record_states:
            while len(trace.live_states) < len(central.journal.records):
                trace.live_states.append(state_to_json(central.state))

    after_central_step()
    for ev in scenario.preload:
        central.handle_scan(ev, 0)
        after_central_step()

    def send(unit: _Unit, now: int):
        frame = unit.frame
        trace.entries.append([now, unit.unit_id, "send", unit.inflight.unit_seq, len(frame)])
        for t in uplink.transmit(now, frame):
            schedule(t, "up", unit.unit_id, frame)

    def start_next(unit: _Unit, now: int):
        if unit.inflight is not None or not unit.pending:
            return
        ev = unit.pending.popleft()
        unit.inflight = ev
        unit.frame = encode_frame(msg_scan(ev))
        trace.scan_frame_sizes.append(len(unit.frame))
        unit.attempt = 1
        send(unit, now)
        for k in range(resend_each):
            schedule(now + (k + 1) * US_PER_MS, "force", unit.unit_id, unit.frame)
        if net.retries:
            schedule(now + backoff_ms(1) * US_PER_MS, "timeout", unit.unit_id, ev.unit_seq)

    for e in scenario.script:
        schedule(e.at_ms * US_PER_MS, "press", e.event)

    now = 0
    limit = time_limit_ms * US_PER_MS
    done = 0
    while queue:
        now, _, kind, data = heapq.heappop(queue)
        if now > limit:
            break
        if kind == "press":
            (ev,) = data
            unit = units[ev.unit_id]
            unit.pending.append(ev)
            start_next(unit, now)
        elif kind == "force":
            uid, frame = data
            trace.entries.append([now, uid, "resend"])
            for t in uplink.transmit(now, frame):
                schedule(t, "up", uid, frame)
        elif kind == "timeout":
            uid, seq = data
            unit = units[uid]
            if unit.inflight is None or unit.inflight.unit_seq != seq:
                continue
            unit.attempt += 1
            send(unit, now)
            schedule(now + backoff_ms(unit.attempt) * US_PER_MS, "timeout", uid, seq)
        elif kind == "up":
            uid, frame = data
            for msg in FrameReader().feed(frame):
                ev = ScanEvent.from_dict(msg["event"])
                n_before = len(central.journal.records)
                out = central.handle_scan(ev, now // US_PER_MS)
                trace.entries.append([now, uid, "deliver", ev.unit_seq, "dup" if out.duplicate else "new"])
                if len(central.journal.records) > n_before:
                    trace.entries.append([now, "central", "journal", central.journal.last_seq])
                after_central_step()
                reply = encode_frame(out.reply)
                for t in downlink.transmit(now, reply):
                    schedule(t, "down", uid, reply)
        elif kind == "down":
            uid, frame = data
            unit = units[uid]
            for msg in unit.reader.feed(frame):
                if unit.inflight is None or msg["seq"] != unit.inflight.unit_seq:
                    continue
                trace.entries.append([now, uid, msg["t"], msg["seq"]])
                trace.replies[(uid, msg["seq"])] = msg
                unit.inflight = None
                done += 1
                trace.completion_ms = now // US_PER_MS
                start_next(unit, now)

    trace.converged = done == total
    trace.final_state = central.state
    trace.journal = central.journal
    trace.uplink_bytes, trace.uplink_busy_us = uplink.bytes, uplink.busy_us
    trace.downlink_bytes, trace.downlink_busy_us = downlink.bytes, downlink.busy_us
    return trace


def same_allocation(a: FloorState, b: FloorState) -> bool:
    """Equal up to clock-derived fields (since times and last_event_time)."""
    return state_to_dict(a, timestamps=False) == state_to_dict(b, timestamps=False)


def check_against_oracle(scenario: Scenario, net: NetConfig, seed: int, **kw) -> tuple[bool, SimTrace, FloorState]:
    trace = run_scenario(scenario, net, seed, **kw)
    expected = oracle_run(scenario)
    return trace.converged and same_allocation(trace.final_state, expected), trace, expected
