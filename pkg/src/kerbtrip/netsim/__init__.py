"""Deterministic discrete-event network simulator with adversary interposition."""

from .attacker import AttackerNode, KnowledgeBase, attacker_closure
from .scenario import (
    AdversaryAction,
    AdversarySpec,
    ExpectSpec,
    ScenarioError,
    ScenarioSpec,
    check_expectations,
    load_scenario,
    parse_scenario,
)
from .world import (
    AlertEntry,
    EventKind,
    GrantEntry,
    SimEvent,
    Trace,
    Verdict,
    World,
    run_scenario,
)

__all__ = [
    "AdversaryAction",
    "AdversarySpec",
    "AlertEntry",
    "AttackerNode",
    "EventKind",
    "ExpectSpec",
    "GrantEntry",
    "KnowledgeBase",
    "ScenarioError",
    "ScenarioSpec",
    "SimEvent",
    "Trace",
    "Verdict",
    "World",
    "attacker_closure",
    "check_expectations",
    "load_scenario",
    "parse_scenario",
    "run_scenario",
]
