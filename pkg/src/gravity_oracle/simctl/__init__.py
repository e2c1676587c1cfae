"""Scenario loading, the deterministic runner, reports and the command line."""

from .runner import RunResult, Simulation, run, run_many, write_outputs
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario

__all__ = [
    "RunResult",
    "Scenario",
    "ScenarioError",
    "Simulation",
    "load_scenario",
    "parse_scenario",
    "run",
    "run_many",
    "write_outputs",
]
