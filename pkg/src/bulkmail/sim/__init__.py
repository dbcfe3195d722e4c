"""Deterministic multi-relay simulation."""

from .attacks import AttackKind, inject_attack
from .network import (
    SIM_EPOCH,
    Action,
    Expect,
    MxTable,
    NodeKind,
    RouteChoice,
    Scenario,
    SimResult,
    Simulator,
    Topology,
    TraceEvent,
    route_with_fallback,
)
from .scenario import load_scenario, parse_scenario, run_scenario

__all__ = [
    "SIM_EPOCH",
    "Action",
    "AttackKind",
    "Expect",
    "MxTable",
    "NodeKind",
    "RouteChoice",
    "Scenario",
    "SimResult",
    "Simulator",
    "Topology",
    "TraceEvent",
    "inject_attack",
    "load_scenario",
    "parse_scenario",
    "route_with_fallback",
    "run_scenario",
]
