"""Deterministic network simulation of many node engines."""
from .config import ConfigError, ScenarioConfig
from .engine import SimEvent, Simulation
from .report import DEFENDED, DOUBLE_SPEND_SUCCEEDED, UNRESOLVABLE_FORK, EXIT_CODES, RunReport


def run_scenario(config: ScenarioConfig) -> RunReport:
    return Simulation(config).run()


__all__ = [
    "ConfigError", "ScenarioConfig", "SimEvent", "Simulation", "RunReport", "run_scenario",
    "DEFENDED", "DOUBLE_SPEND_SUCCEEDED", "UNRESOLVABLE_FORK", "EXIT_CODES",
]
