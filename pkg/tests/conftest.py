import numpy as np
import pytest

from advperc.planners import IdmParams
from advperc.scenario import (
    SCENARIO_IDS,
    AgentScript,
    AgentState,
    EgoRoute,
    GroundTruthSequence,
    Lane,
    Scenario,
    load_scenario,
)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def bundled():
    return {name: load_scenario(name) for name in SCENARIO_IDS}


def straight_scenario(agents=(), T=120, ego_speed=10.0, scenario_id="custom"):
    """A straight road along +x with an IDM ego starting at the origin."""
    return Scenario(
        scenario_id=scenario_id,
        map=(Lane("east", ((-50.0, 0.0), (500.0, 0.0))),),
        ego_route=EgoRoute(((0.0, 0.0), (500.0, 0.0)), ((0.0, 13.0),), ego_speed),
        agent_scripts=tuple(agents),
        duration_T=T,
        dt=0.1,
        planner_kind="idm",
        idm=IdmParams(),
    )


def parked(agent_id, x, y):
    return AgentScript(agent_id, ((x, y), (x + 1.0, y)), 0.0)


@pytest.fixture
def make_straight():
    return straight_scenario


def make_truth(positions, headings=None, ego_position=(0.0, 0.0)):
    """Ground truth with a static ego from ``(T, d, 2)`` agent positions."""
    positions = np.asarray(positions, dtype=float)
    T, d = positions.shape[:2]
    headings = np.zeros((T, d)) if headings is None else np.asarray(headings, dtype=float)
    ego = [AgentState(-1, tuple(ego_position), 0.0, 0.0, (4.5, 1.9))] * T
    return GroundTruthSequence(np.arange(T) * 0.1, ego, np.arange(d), positions, headings,
                               np.zeros((T, d)), np.tile([4.5, 1.9], (d, 1)))
