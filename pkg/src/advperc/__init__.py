"""Adversarial perception-error search against black-box driving planners."""

from .errors import (
    AgentError,
    ErrorSequence,
    PerceivedSequence,
    apply_errors,
    full_drop_error,
    load_errors,
    perturb,
    save_errors,
    segment_drop_error,
)
from .scenario import (
    AgentState,
    GroundTruthSequence,
    Scenario,
    ScenarioError,
    generate_ground_truth,
    load_scenario,
)
from .simulation import Rollout, evaluate_rule, rollout

__version__ = "0.1.0"

__all__ = [
    "AgentError",
    "AgentState",
    "ErrorSequence",
    "GroundTruthSequence",
    "PerceivedSequence",
    "Rollout",
    "Scenario",
    "ScenarioError",
    "apply_errors",
    "evaluate_rule",
    "full_drop_error",
    "generate_ground_truth",
    "load_errors",
    "load_scenario",
    "perturb",
    "rollout",
    "save_errors",
    "segment_drop_error",
]
