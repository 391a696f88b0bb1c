"""Open-loop rollouts: replay scripted agents, re-plan the ego on perturbed perception."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ErrorSequence, PerceivedSequence, apply_errors, check_dimensions
from .geometry import box_corners, signed_separation, wrap_angle
from .planners import (
    ACCEL_MAX,
    ACCEL_MIN,
    Action,
    EgoView,
    longitudinal_command,
    plan_geometric,
    plan_idm,
    pure_pursuit,
)
from .scenario import AgentState, GroundTruthSequence, Scenario, generate_ground_truth
from .tracker import Tracker

NO_AGENT_SENTINEL = 1e9  # serialised stand-in for +inf when there is nothing to collide with


@dataclass
class Rollout:
    ego_trajectory: list[AgentState]
    actions: list[tuple[int, Action]]
    rule_value: float
    perceived: PerceivedSequence
    world: GroundTruthSequence  # scripted agents plus the ego trajectory actually driven
    track_log: list | None = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return self.rule_value < 0.0


def _ego_corners(ego: AgentState) -> np.ndarray:
    return box_corners(ego.position, ego.heading, *ego.extent)


def separation_matrix(world: GroundTruthSequence) -> np.ndarray:
    """Signed ego-agent separation for every frame and agent, shape (T, d)."""
    out = np.full((world.T, world.d), math.inf)
    for t in range(world.T):
        ec = _ego_corners(world.ego[t])
        for j in range(world.d):
            ac = box_corners(world.positions[t, j], world.headings[t, j], *world.extents[j])
            out[t, j] = signed_separation(ec, ac)
    return out


def min_separation(world: GroundTruthSequence) -> float:
    """Minimum signed separation over frames and agents (``inf`` without agents).

    Frames are visited in order of a bounding-circle lower bound so that
    exact rectangle distances are only computed where they can matter.
    """
    if world.d == 0:
        return math.inf
    ego_pos = world.ego_positions()
    ego_r = np.array([0.5 * math.hypot(*e.extent) for e in world.ego])
    agent_r = 0.5 * np.hypot(world.extents[:, 0], world.extents[:, 1])
    centre = np.linalg.norm(world.positions - ego_pos[:, None, :], axis=2)
    lower = centre - ego_r[:, None] - agent_r[None, :]
    order = np.argsort(lower, axis=None, kind="stable")
    best = math.inf
    for flat in order:
        t, j = divmod(int(flat), world.d)
        if lower[t, j] >= best:
            break
        ac = box_corners(world.positions[t, j], world.headings[t, j], *world.extents[j])
        best = min(best, signed_separation(_ego_corners(world.ego[t]), ac))
    return best


def evaluate_rule(rollout: Rollout) -> float:
    return min_separation(rollout.world)


PerceiveFn = Callable[[int, AgentState], list]


def rollout(
    scenario: Scenario,
    e: ErrorSequence | None = None,
    *,
    ground_truth: GroundTruthSequence | None = None,
    perceive: PerceiveFn | None = None,
    record_tracks: bool = False,
) -> Rollout:
    """Simulate the ego against perception ``I(y, e)``.

    ``perceive(t, ego_state)`` may be given instead of ``e`` to generate
    detections on the fly (used for closed-loop sampling from a perception
    error model); it must return a ``PerceivedSequence``-compatible frame as
    ``(present, positions, headings)`` arrays for the ``d`` agents.
    """
    gt = ground_truth if ground_truth is not None else generate_ground_truth(scenario)
    T, d, dt = scenario.duration_T, scenario.n_agents, scenario.dt
    if perceive is None:
        e = ErrorSequence.zeros(T, d) if e is None else e
        check_dimensions(e, T, d)
        perceived = apply_errors(gt, e)
    else:
        perceived = apply_errors(gt, ErrorSequence.zeros(T, d))

    route = scenario.route()
    params = scenario.idm
    maneuver = scenario.maneuver
    tracker = Tracker(scenario.tracker, dt)
    replan_every = scenario.replan_every

    ego0 = scenario.ego_initial_state()
    x, y = ego0.position
    heading, speed = ego0.heading, ego0.speed
    length = ego0.extent[0]
    s_ego = scenario.ego_route.start_s
    committed = False
    action: Action | None = None
    plan_frame = 0

    ego_traj: list[AgentState] = []
    actions: list[tuple[int, Action]] = []
    track_log = [] if record_tracks else None

    for t in range(T):
        state = AgentState(-1, (x, y), heading, speed, ego0.extent)
        ego_traj.append(state)

        if perceive is not None:
            present, pos, hdg = perceive(t, state)
            perceived.present[t] = present
            perceived.positions[t] = np.where(present[:, None], pos, np.nan)
            perceived.headings[t] = np.where(present, hdg, np.nan)
        tracks = tracker.step(perceived.detections(t))
        if track_log is not None:
            track_log.append([(tr.track_id, tr.mean.copy(), tr.time_since_update) for tr in tracks])

        s_ego, _ = route.project((x, y))
        v_target = scenario.ego_route.target_speed(s_ego)
        if maneuver is not None and s_ego > maneuver.commit_point:
            committed = True  # latched: past the stop line there is no going back

        if t % replan_every == 0:
            view = EgoView(s=s_ego, speed=speed, length=length, v_target=v_target, committed=committed)
            if scenario.planner_kind == "idm":
                action = plan_idm(tracks, route, params, view)
            else:
                action = plan_geometric(tracks, route, maneuver, view, params)
            plan_frame = t
            actions.append((t, action))

        elapsed = (t - plan_frame) * dt
        held = action
        if committed and action.stop_s is not None:
            held = Action(accel=action.accel, v_target=action.v_target)  # overshot a hold: drop it
        accel = longitudinal_command(held, s_ego, speed, elapsed, length, params)
        accel = min(max(accel, ACCEL_MIN), ACCEL_MAX)
        kappa = pure_pursuit((x, y), heading, speed, route, s_ego)

        # kinematic bicycle in curvature form, explicit Euler
        x += speed * math.cos(heading) * dt
        y += speed * math.sin(heading) * dt
        heading = wrap_angle(heading + speed * kappa * dt)
        speed = max(0.0, speed + accel * dt)

    world = gt.with_ego(ego_traj)
    return Rollout(
        ego_trajectory=ego_traj,
        actions=actions,
        rule_value=min_separation(world),
        perceived=perceived,
        world=world,
        track_log=track_log,
    )


def dump_rollout_csv(ro: Rollout, path) -> None:
    """One row per frame: ego pose, ground-truth and perceived agent poses,
    running minimum of the rule value and the planner decision at replan ticks."""
    world, per = ro.world, ro.perceived
    ids = [int(a) for a in world.agent_ids]
    sep = separation_matrix(world)
    running = np.minimum.accumulate(sep.min(axis=1) if world.d else np.full(world.T, math.inf))
    decisions = dict(ro.actions)
    header = ["frame", "t", "ego_x", "ego_y", "ego_heading", "ego_speed"]
    for a in ids:
        header += [f"a{a}_x", f"a{a}_y", f"a{a}_heading", f"p{a}_x", f"p{a}_y", f"p{a}_heading"]
    header += ["rule_running_min", "planner_accel", "planner_note"]

    def fmt(v: float) -> str:
        if not math.isfinite(v):
            return "" if math.isnan(v) else repr(NO_AGENT_SENTINEL)
        return f"{v:.6f}"

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(world.T):
            ego = world.ego[t]
            row = [t, fmt(world.timestamps[t]), fmt(ego.position[0]), fmt(ego.position[1]),
                   fmt(ego.heading), fmt(ego.speed)]
            for j in range(world.d):
                row += [fmt(world.positions[t, j, 0]), fmt(world.positions[t, j, 1]), fmt(world.headings[t, j]),
                        fmt(per.positions[t, j, 0]), fmt(per.positions[t, j, 1]), fmt(per.headings[t, j])]
            act = decisions.get(t)
            row += [fmt(running[t]), "" if act is None else fmt(act.accel), "" if act is None else act.note]
            w.writerow(row)
