from __future__ import annotations

import pytest

from dca.sim import ScenarioConfig, Simulation
from dca.sim.cli import shipped_scenarios

# Lines collected by the acceptance tests, echoed at the end of the session.
ACCEPTANCE_LINES: dict[int, str] = {}

_SUITE: dict[str, tuple] = {}


def run_shipped(name: str):
    """Run a shipped scenario once per session; returns ``(simulation, report)``."""
    if name not in _SUITE:
        sim = Simulation(ScenarioConfig.load(shipped_scenarios()[name], env=False))
        _SUITE[name] = (sim, sim.run())
    return _SUITE[name]


@pytest.fixture(scope="session")
def suite():
    return {name: run_shipped(name) for name in sorted(shipped_scenarios())}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
