"""Deterministic simulation harness and reference oracle."""

from .harness import NetConfig, SimTrace, check_against_oracle, run_scenario, same_allocation
from .oracle import oracle_run
from .scenario import (
    InvalidCounts,
    InvalidScenario,
    Scenario,
    ScriptEntry,
    gen_random_scenario,
    gen_shift_change,
    load_scenario,
    scenario_from_dict,
)

__all__ = [
    "InvalidCounts",
    "InvalidScenario",
    "NetConfig",
    "Scenario",
    "ScriptEntry",
    "SimTrace",
    "check_against_oracle",
    "gen_random_scenario",
    "gen_shift_change",
    "load_scenario",
    "oracle_run",
    "run_scenario",
    "same_allocation",
    "scenario_from_dict",
]
