import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import CLAIM, IN, OUT, fold, make_registry, scenario_of
from omams.allocator import (
    ClockRegression,
    apply_event,
    handle_check_in,
    handle_check_out,
    handle_claim,
    AlreadyPresent,
    ClaimConflict,
    NotPresent,
    NotWaiting,
    UnknownMachine,
    pick_machine,
    process_scan,
)
from omams.core import (
    Ack,
    Allocated,
    DisplayUpdate,
    FloorState,
    JournalAppend,
    Machine,
    Notify,
    OFF_SITE,
    Reject,
    ScanEvent,
    Waiting,
    check_floor_invariants,
    snapshot,
)
from omams.journal import Applied, Rejected
from omams.registry import verify_scan
from omams.sim import oracle_run, same_allocation

TWO = {"M01": "W1", "M02": "W1"}


def assert_matches_oracle(reg, events):
    live, _ = fold(reg, events)
    expected = oracle_run(scenario_of(reg, events))
    assert same_allocation(live, expected)
    return live


def test_pick_machine_lowest_lexicographic():
    state = FloorState.initial({"M02": "W1", "M01": "W1", "M10": "W1", "M03": "W2"})
    assert pick_machine(state, "W1") == "M01"
    state = FloorState.initial({"M10": "W1", "M02": "W1"})
    assert pick_machine(state, "W1") == "M02"
    full = FloorState(machines={"M01": Machine("W1", "X", 0)}, operators={"X": Allocated("M01", 0)})
    assert pick_machine(full, "W1") is None


def test_first_check_in_effects(scan):
    reg = make_registry(TWO, {"A24564": "W1"})
    ev = scan(IN, "A24564")
    state, effects = process_scan(FloorState.initial(reg.machines), reg, ev, 100)
    assert [type(e) for e in effects] == [JournalAppend, Ack, DisplayUpdate, Notify]
    assert effects[0].record.outcome == Applied({"result": "allotted", "workshop": "W1", "machine": "M01"})
    assert effects[3].operator == "A24564" and "M01" in effects[3].text
    assert effects[2].board == snapshot(state)
    assert state.status_of("A24564") == Allocated("M01", 100)
    assert_matches_oracle(reg, [ev])


def test_check_in_to_full_workshop_waits(scan):
    reg = make_registry({"M01": "W1"}, {"A24564": "W1", "B11111": "W1"})
    live = assert_matches_oracle(reg, [scan(IN, "B11111"), scan(IN, "A24564")])
    assert live.machines["M01"].operator == "B11111"
    assert live.waiting["W1"] == ("A24564",)
    assert isinstance(live.status_of("A24564"), Waiting)


def test_double_check_in_rejected(scan):
    reg = make_registry(TWO, {"A24564": "W1"})
    state, effs = fold(reg, [scan(IN, "A24564"), scan(IN, "A24564")])
    assert [type(e) for e in effs[1]] == [JournalAppend, Reject]
    assert effs[1][1].reason == "AlreadyPresent"
    assert effs[1][0].record.outcome == Rejected("AlreadyPresent")
    assert state.machines["M01"].operator == "A24564" and state.machines["M02"].vacant
    with pytest.raises(AlreadyPresent):
        handle_check_in(state, "A24564", "W1", 5000)


def test_check_out_hands_machine_to_queue_head(scan):
    reg = make_registry({"M01": "W1"}, {"A24564": "W1", "C33333": "W1", "D44444": "W1"})
    events = [scan(IN, "A24564"), scan(IN, "C33333"), scan(IN, "D44444"), scan(OUT, "A24564")]
    live = assert_matches_oracle(reg, events)
    assert live.machines["M01"].operator == "C33333"
    assert live.waiting["W1"] == ("D44444",)
    assert live.status_of("A24564") == OFF_SITE


def test_check_out_frees_machine(scan):
    reg = make_registry({"M01": "W1"}, {"A24564": "W1"})
    live = assert_matches_oracle(reg, [scan(IN, "A24564"), scan(OUT, "A24564")])
    assert live.machines["M01"].vacant
    assert snapshot(live).vacant == (("M01", "W1"),)


def test_check_out_while_off_site(scan):
    reg = make_registry(TWO, {"A24564": "W1"})
    state0 = FloorState.initial(reg.machines)
    ev = scan(OUT, "A24564")
    state, effects = process_scan(state0, reg, ev, 10)
    assert [type(e) for e in effects] == [JournalAppend, Reject]
    assert effects[1].reason == "NotPresent"
    # nothing but the consumed idempotency key and the clock changed
    assert state.machines == state0.machines and state.operators == {} and state.is_applied("U1", 1)
    with pytest.raises(NotPresent):
        handle_check_out(state0, "A24564", 10)


def test_waiting_operator_check_out_leaves_queue(scan):
    reg = make_registry({"M01": "W1"}, {"A24564": "W1", "B11111": "W1", "C33333": "W1"})
    live = assert_matches_oracle(
        reg, [scan(IN, "A24564"), scan(IN, "B11111"), scan(IN, "C33333"), scan(OUT, "B11111")]
    )
    assert live.waiting["W1"] == ("C33333",)


def test_claim_across_workshops(scan):
    reg = make_registry({"M01": "W1", "M07": "W2"}, {"B11111": "W1", "A24564": "W1"})
    events = [scan(IN, "B11111"), scan(IN, "A24564"), scan(CLAIM, "A24564", "M07")]
    live = assert_matches_oracle(reg, events)
    assert live.status_of("A24564") == Allocated("M07", 2000)
    assert live.waiting["W1"] == ()
    assert live.machines["M07"].workshop == "W2"


def test_claim_errors(scan):
    reg = make_registry({"M01": "W1", "M07": "W2"}, {"B11111": "W1", "A24564": "W1", "C33333": "W1"})
    state, _ = fold(reg, [scan(IN, "B11111"), scan(IN, "A24564")])
    with pytest.raises(ClaimConflict):
        handle_claim(state, "A24564", "M01", 9000)
    with pytest.raises(NotWaiting):
        handle_claim(state, "B11111", "M07", 9000)
    with pytest.raises(NotWaiting):
        handle_claim(state, "C33333", "M07", 9000)
    with pytest.raises(UnknownMachine):
        handle_claim(state, "A24564", "M99", 9000)
    _, effs = fold(reg, [scan(IN, "B11111"), scan(CLAIM, "B11111", "M07")])
    assert effs[1][-1] == Reject("U1", 4, "NotWaiting")


def test_unauthorized_scans_are_audited(scan):
    reg = make_registry(TWO, {"A24564": "W1", "B11111": ("W1", False)})
    state, effs = fold(reg, [scan(IN, "Z99999"), scan(IN, "B11111")])
    assert effs[0][1].reason == "Unauthorized:UnknownBadge"
    assert effs[1][1].reason == "Unauthorized:Inactive"
    assert all(m.vacant for m in state.machines.values())
    assert state.operators == {}


def test_duplicate_delivery_reacks_only(scan):
    reg = make_registry(TWO, {"A24564": "W1"})
    ev = scan(IN, "A24564")
    s1, _ = process_scan(FloorState.initial(reg.machines), reg, ev, 10)
    s2, effects = apply_event(s1, verify_scan(reg, ev), 20)
    assert s2 is s1
    assert effects == [Ack("U1", 1)]


def test_clock_regression(scan):
    reg = make_registry(TWO, {"A24564": "W1"})
    s1, _ = process_scan(FloorState.initial(reg.machines), reg, scan(IN, "A24564"), 10)
    with pytest.raises(ClockRegression):
        process_scan(s1, reg, scan(OUT, "A24564"), 9)


def test_notify_only_on_new_allocation(scan):
    reg = make_registry({"M01": "W1"}, {"A24564": "W1", "C33333": "W1"})
    _, effs = fold(reg, [scan(IN, "A24564"), scan(IN, "C33333"), scan(OUT, "A24564")])
    notes = [[e.operator for e in batch if isinstance(e, Notify)] for batch in effs]
    assert notes == [["A24564"], [], ["C33333"]]


def test_oracle_walkthrough_by_hand(scan):
    # two W1 machines, three arrivals: first two seated in id order, third waits
    reg = make_registry(TWO, {"AAAA": "W1", "BBBB": "W1", "CCCC": "W1"})
    expected = oracle_run(scenario_of(reg, [scan(IN, "AAAA"), scan(IN, "BBBB"), scan(IN, "CCCC")]))
    assert expected.machines["M01"].operator == "AAAA"
    assert expected.machines["M02"].operator == "BBBB"
    assert expected.waiting["W1"] == ("CCCC",)


# -- random sequences ---------------------------------------------------------

MACHINES = {"A1": "W1", "A2": "W1", "B1": "W2", "B2": "W2", "B3": "W2", "C1": "W3"}
BADGES = [f"OP{i:02d}" for i in range(10)]
REG = make_registry(MACHINES, {b: ("W1", "W2", "W3")[i % 3] for i, b in enumerate(BADGES)},
                    units={"UA": "W1", "UB": "W2", "UC": "W3"})

event_st = st.tuples(
    st.sampled_from(["CheckIn", "CheckIn", "CheckOut", "Claim"]),
    st.sampled_from(BADGES + ["ZZZZ"]),
    st.sampled_from(sorted(MACHINES) + ["XX"]),
    st.sampled_from(["UA", "UB", "UC"]),
)


def build_events(raw):
    seqs = {}
    out = []
    for kind, badge, machine, unit in raw:
        seqs[unit] = seqs.get(unit, 0) + 1
        out.append(ScanEvent(unit, seqs[unit], kind, badge, machine if kind == "Claim" else None))
    return out


@settings(max_examples=200, deadline=None)
@given(st.lists(event_st, max_size=60))
def test_invariants_and_oracle_equivalence(raw):
    events = build_events(raw)
    state = FloorState.initial(REG.machines)
    for i, ev in enumerate(events):
        before = state
        state, effects = process_scan(state, REG, ev, i)
        assert check_floor_invariants(state) == []
        kinds = [type(e) for e in effects]
        if Ack in kinds:
            assert kinds.count(JournalAppend) == 1 and kinds.count(DisplayUpdate) == 1
            newly = {o for o, s in state.operators.items()
                     if isinstance(s, Allocated) and before.operators.get(o) != s}
            assert {e.operator for e in effects if isinstance(e, Notify)} == newly
        else:
            assert kinds == [JournalAppend, Reject]
    assert same_allocation(state, oracle_run(scenario_of(REG, events)))


@settings(max_examples=100, deadline=None)
@given(st.lists(event_st, max_size=40), st.randoms(use_true_random=False))
def test_reapplying_everything_changes_nothing(raw, rnd):
    events = build_events(raw)
    state, _ = fold(REG, events)
    again = list(events)
    rnd.shuffle(again)
    t = state.last_event_time
    replayed = state
    for ev in again:
        t += 1
        replayed, effects = process_scan(replayed, REG, ev, t)
        assert effects == [Ack(ev.unit_id, ev.unit_seq)]
    assert replayed == state


@settings(max_examples=100, deadline=None)
@given(st.lists(event_st, max_size=40))
def test_deterministic(raw):
    events = build_events(raw)
    assert fold(REG, events)[0] == fold(REG, events)[0]


def test_fifo_fairness_long_run():
    rng = random.Random(7)
    raw = [
        (rng.choice(["CheckIn", "CheckIn", "CheckOut", "Claim"]), rng.choice(BADGES),
         rng.choice(sorted(MACHINES)), rng.choice(["UA", "UB", "UC"]))
        for _ in range(3000)
    ]
    state = FloorState.initial(REG.machines)
    for i, ev in enumerate(build_events(raw)):
        before = state
        state, _ = process_scan(state, REG, ev, i)
        for w, q in before.waiting.items():
            after = state.waiting[w]
            survivors = [o for o in q if o in after]
            # queue order kept; newcomers only at the back
            assert list(after[: len(survivors)]) == survivors
            promoted = [o for o in q if o not in after and isinstance(state.status_of(o), Allocated)
                        and state.machines[state.status_of(o).machine].workshop == w]
            for o in promoted:
                assert q.index(o) == 0
