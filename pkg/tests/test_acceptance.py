"""Acceptance criteria, one test each.

The conftest prints a PASS/FAIL line per test in the terminal summary.
"""

import random
import time

import pytest

from helpers import make_registry
from omams.allocator import process_scan
from omams.core import Allocated, EventKind, FloorState, ScanEvent, Waiting, check_floor_invariants, state_to_json
from omams.journal import (
    AdminMark,
    Applied,
    DuplicateAck,
    JournalRecord,
    allocated_time_by_operator,
    load_records,
    replay,
    utilization_report,
    work_hours_report,
)
from omams.protocol import SCAN_FRAME_BUDGET
from omams.sim import (
    NetConfig,
    Scenario,
    ScriptEntry,
    check_against_oracle,
    gen_random_scenario,
    gen_shift_change,
    run_scenario,
    same_allocation,
)

LOSSY = NetConfig(drop_prob=0.2, dup_prob=0.2, delay_min_ms=0, delay_max_ms=2000, retries=True)
N_SCENARIOS = 1000


@pytest.fixture(scope="module")
def lossy_runs():
    """The 1,000 lossy runs of criterion 2, shared with criteria 4, 6 and 7."""
    started = time.perf_counter()
    runs = []
    for seed in range(N_SCENARIOS):
        sc = gen_random_scenario(seed, max_operators=50, max_machines=20, workshops=2)
        ok, trace, expected = check_against_oracle(sc, LOSSY, seed, record_states=True)
        runs.append((seed, sc, ok, trace, expected))
    return runs, time.perf_counter() - started


def _allocated(state):
    return {o for o, s in state.operators.items() if isinstance(s, Allocated)}


def test_c1_shift_change_walkthrough():
    started = time.perf_counter()
    sc = gen_shift_change(10, 12, 10, seed=0)
    ok, trace, expected = check_against_oracle(sc, NetConfig(), seed=0)
    elapsed = time.perf_counter() - started

    live = trace.final_state
    assert ok and trace.converged
    assert same_allocation(live, expected)
    assert len(_allocated(live)) == 10
    assert live.waiting["W1"] == ("IN0011", "IN0012")
    assert all(isinstance(live.status_of(o), Waiting) for o in ("IN0011", "IN0012"))
    assert elapsed < 1.0, elapsed

    # two more incoming-shift check-outs hand their machines to the queue heads in order
    m1 = live.status_of("IN0001").machine
    m2 = live.status_of("IN0002").machine
    end = sc.script[-1].at_ms
    seq = max(e.event.unit_seq for e in sc.script if e.event.unit_id == "OUT-W1")
    extra = (
        ScriptEntry(end + 2000, ScanEvent("OUT-W1", seq + 1, EventKind.CHECK_OUT, "IN0001")),
        ScriptEntry(end + 4000, ScanEvent("OUT-W1", seq + 2, EventKind.CHECK_OUT, "IN0002")),
    )
    longer = Scenario(sc.registry, sc.script + extra, sc.preload, end + 4000)
    ok, trace, expected = check_against_oracle(longer, NetConfig(), seed=0)
    assert ok
    after = trace.final_state
    assert after.waiting["W1"] == ()
    assert after.machines[m1].operator == "IN0011"
    assert after.machines[m2].operator == "IN0012"
    assert len(_allocated(after)) == 10


def test_c2_oracle_equivalence_under_loss(lossy_runs):
    runs, elapsed = lossy_runs
    failures = [seed for seed, _, ok, _, _ in runs if not ok]
    assert len(runs) == N_SCENARIOS
    assert failures == []
    assert elapsed < 60.0, elapsed
    # the fault model actually fired
    faults = sum(1 for _, _, _, tr, _ in runs for e in tr.entries if e[2] in ("drop", "dup"))
    assert faults > N_SCENARIOS


def test_c3_invariants_over_10000_events():
    machines = {"A1": "W1", "A2": "W1", "A3": "W1", "B1": "W2", "B2": "W2", "C1": "W3"}
    badges = [f"OP{i:02d}" for i in range(14)]
    reg = make_registry(machines, {b: ("W1", "W2", "W3")[i % 3] for i, b in enumerate(badges)},
                        units={"UA": "W1", "UB": "W2", "UC": "W3"})
    rng = random.Random(2024)
    seqs = {}
    state = FloorState.initial(reg.machines)
    violations = []
    for i in range(10_000):
        unit = rng.choice(["UA", "UB", "UC"])
        seqs[unit] = seqs.get(unit, 0) + 1
        kind = rng.choice([EventKind.CHECK_IN] * 3 + [EventKind.CHECK_OUT] * 2 + [EventKind.CLAIM])
        machine = rng.choice(sorted(machines)) if kind is EventKind.CLAIM else None
        ev = ScanEvent(unit, seqs[unit], kind, rng.choice(badges), machine)

        before = state
        state, _ = process_scan(state, reg, ev, i)
        violations += [f"event {i}: {v}" for v in check_floor_invariants(state)]

        # exclusivity and conservation, counted directly
        holders = [m.operator for m in state.machines.values() if m.operator is not None]
        assert len(holders) == len(set(holders))
        waiting = [o for q in state.waiting.values() for o in q]
        assert len(holders) + len(waiting) == len(state.operators)
        # quiescent matching
        for w, q in state.waiting.items():
            if q:
                assert all(not m.vacant for m in state.machines.values() if m.workshop == w)
        # FIFO: survivors keep order, newcomers join at the back, only the head is promoted
        for w, q in before.waiting.items():
            after = state.waiting[w]
            survivors = [o for o in q if o in after]
            assert list(after[: len(survivors)]) == survivors
            for o in q:
                s = state.status_of(o)
                if o not in after and isinstance(s, Allocated) and state.machines[s.machine].workshop == w:
                    assert q.index(o) == 0
    assert violations == []


def test_c4_replay_determinism_and_truncation(lossy_runs):
    runs, _ = lossy_runs
    rng = random.Random(4)
    cuts_checked = 0
    for seed, sc, _, trace, _ in runs:
        records = trace.journal.records
        assert state_to_json(replay(records, sc.registry)) == state_to_json(trace.final_state), seed
        data = trace.journal.to_bytes()
        for _ in range(100):
            cut = rng.randrange(len(data) + 1)
            prefix, err = load_records(data[:cut])
            state = replay(prefix, sc.registry)
            k = len(prefix)
            assert prefix == records[:k], (seed, cut)
            assert err is None or (err.torn_tail and err.seq == k + 1), (seed, cut)
            expected = trace.live_states[k - 1] if k else state_to_json(FloorState.initial(sc.registry.machines))
            assert state_to_json(state) == expected, (seed, cut)
            cuts_checked += 1
    assert cuts_checked == 100 * N_SCENARIOS


def _applied_count(trace):
    return sum(isinstance(r.outcome, Applied) for r in trace.journal.records)


def test_c5_idempotent_redelivery():
    scenarios = [(s, gen_random_scenario(s)) for s in range(100)]
    scenarios.append((0, gen_shift_change(10, 12, 10, seed=0)))
    for seed, sc in scenarios:
        once = run_scenario(sc, NetConfig(), seed)
        twice = run_scenario(sc, NetConfig(dup_prob=1.0), seed, resend_each=1)
        assert once.converged and twice.converged
        assert same_allocation(twice.final_state, once.final_state), seed
        assert _applied_count(twice) == _applied_count(once), seed
        assert sum(isinstance(r.outcome, DuplicateAck) for r in twice.journal.records) >= 3 * len(sc.script)


def test_c6_link_budget(lossy_runs):
    runs, _ = lossy_runs
    assert max(size for _, _, _, tr, _ in runs for size in tr.scan_frame_sizes) <= SCAN_FRAME_BUDGET

    net = NetConfig(uplink_bps=42_800, downlink_bps=85_600)
    sc = gen_shift_change(100, 100, 100, seed=0, gap_ms=(0, 0))
    trace = run_scenario(sc, net, seed=0)
    assert len(trace.scan_frame_sizes) == 200
    assert max(trace.scan_frame_sizes) <= SCAN_FRAME_BUDGET
    assert trace.converged
    assert trace.uplink_bytes == sum(trace.scan_frame_sizes)  # nothing was retransmitted
    bound_ms = trace.uplink_bytes * 8 * 1000 / net.uplink_bps
    worst_case_ms = 200 * SCAN_FRAME_BUDGET * 8 * 1000 / net.uplink_bps
    print(f"completion {trace.completion_ms} ms, serialization bound {bound_ms:.0f} ms "
          f"(256-byte frames would need {worst_case_ms:.0f} ms)")
    assert bound_ms <= trace.completion_ms < 15_000
    assert _allocated(trace.final_state) == {f"IN{i:04d}" for i in range(1, 101)}
    assert check_floor_invariants(trace.final_state) == []


H = 3_600_000


def _scan(seq, t, kind, summary):
    return JournalRecord(seq, t, ScanEvent("U1", seq, kind, "A24564"), Applied(summary))


def test_c7_reports(lossy_runs):
    day = 1_760_054_400_000
    hours = [
        JournalRecord(1, day, AdminMark("startup", {"M01": "W1"})),
        _scan(2, day + 8 * H, EventKind.CHECK_IN, {"result": "allotted", "workshop": "W1", "machine": "M01"}),
        _scan(3, day + 16 * H, EventKind.CHECK_OUT,
              {"result": "checked_out", "released": "M01", "reassigned": None, "left_queue": None}),
    ]
    assert work_hours_report(hours, "A24564", (day, day + 24 * H)).total_hours == "8.000"

    busy = [
        hours[0],
        _scan(2, day + 9 * H, EventKind.CHECK_IN, {"result": "allotted", "workshop": "W1", "machine": "M01"}),
        _scan(3, day + 15 * H, EventKind.CHECK_OUT,
              {"result": "checked_out", "released": "M01", "reassigned": None, "left_queue": None}),
    ]
    assert f"{utilization_report(busy, 'M01', (day + 8 * H, day + 16 * H)).fraction:.3f}" == "0.750"

    runs, _ = lossy_runs
    for seed, sc, _, trace, _ in runs:
        records = trace.journal.records
        end = records[-1].central_time
        for window in ((0, end), (end // 3, 2 * end // 3)):
            machine_ms = sum(utilization_report(records, m, window).total_ms for m in sc.registry.machines)
            operator_ms = sum(allocated_time_by_operator(records, window).values())
            assert machine_ms == operator_ms, (seed, window)
