"""Scenario files and the deterministic simulator that runs them."""

from .engine import InvariantViolation, Metrics, SimNet, run_scenario
from .scenario import (
    Behavior,
    DeviceClass,
    Fault,
    FaultKind,
    Scenario,
    ScenarioError,
    ScenarioInvalid,
    ScenarioParseError,
    SimPeer,
    inject_fault,
    load_scenario,
    parse_scenario,
)

__all__ = [
    "Behavior",
    "DeviceClass",
    "Fault",
    "FaultKind",
    "InvariantViolation",
    "Metrics",
    "Scenario",
    "ScenarioError",
    "ScenarioInvalid",
    "ScenarioParseError",
    "SimNet",
    "SimPeer",
    "inject_fault",
    "load_scenario",
    "parse_scenario",
    "run_scenario",
]
