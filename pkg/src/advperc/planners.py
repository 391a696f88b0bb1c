"""Deterministic black-box policies acting on confirmed tracks.

Two planners are provided:

* ``plan_idm``: route-following with the Intelligent Driver Model for the
  longitudinal command (car following on the nearest in-corridor track).
* ``plan_geometric``: a gap-acceptance planner for overtakes and junction
  turns.  It predicts every track at constant velocity over a short horizon
  and only lets the ego pass the commit point if each conflicting track
  leaves a large enough time gap; once past that point it never yields.
  It is a simple stand-in for an optimisation-based planner and reproduces
  only the go/no-go decision structure.

Planners run at the replanning interval and return an ``Action`` which the
simulator holds until the next replan.  ``longitudinal_command`` and
``pure_pursuit`` execute a held action against the ego's own state every
frame; neither looks at perception.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Polyline

ACCEL_MIN = -6.0
ACCEL_MAX = 3.0
CURVATURE_MAX = 0.2


@dataclass(frozen=True)
class IdmParams:
    v0: float = 13.0
    T_headway: float = 1.5
    a_max: float = 1.5
    b_comf: float = 2.0
    s0: float = 2.0
    delta: float = 4.0
    corridor: float = 2.0  # half-width of the lane corridor used to pick a leader

    def __post_init__(self):
        for name in ("v0", "T_headway", "a_max", "b_comf", "s0", "delta", "corridor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IdmParams.{name} must be positive")


@dataclass(frozen=True)
class ManeuverSpec:
    maneuver: str
    gap_accept_s: float
    commit_point: float  # route arclength (ego centre) of the stop line
    conflict_start: float  # route arclength span shared with other traffic
    conflict_end: float
    conflict_radius: float = 2.5
    horizon_s: float = 5.0
    go_accel: float = 2.0

    def __post_init__(self):
        if self.maneuver not in ("follow", "overtake", "turn_left", "turn_right"):
            raise ValueError(f"unknown maneuver {self.maneuver!r}")
        if not self.gap_accept_s > 0:
            raise ValueError("gap_accept_s must be positive")
        if not self.conflict_start <= self.conflict_end:
            raise ValueError("conflict_start must not exceed conflict_end")
        if self.commit_point > self.conflict_start:
            raise ValueError("commit_point must lie before the conflict span")


@dataclass(frozen=True)
class EgoView:
    """What a planner knows about the ego vehicle (its own state)."""

    s: float  # route arclength of the ego centre
    speed: float
    length: float
    v_target: float
    committed: bool = False


@dataclass(frozen=True)
class Action:
    accel: float
    v_target: float
    lead_s: float | None = None
    lead_v: float = 0.0
    lead_length: float = 0.0
    stop_s: float | None = None
    go: bool = True
    note: str = ""


def idm_acceleration(v: float, gap: float, v_lead: float, p: IdmParams, v0: float | None = None) -> float:
    """IDM acceleration, clamped to ``[ACCEL_MIN, a_max]``.

    ``gap`` is the bumper-to-bumper distance; ``math.inf`` means no leader.
    A non-positive gap is an emergency and returns the full braking limit.
    """
    v0 = p.v0 if v0 is None else v0
    if gap <= 0.0:
        return ACCEL_MIN
    free = 1.0 - (v / v0) ** p.delta if v0 > 0 else -1.0
    if math.isinf(gap):
        interaction = 0.0
    else:
        s_star = p.s0 + v * p.T_headway + v * (v - v_lead) / (2.0 * math.sqrt(p.a_max * p.b_comf))
        s_star = max(s_star, 0.0)
        interaction = (s_star / gap) ** 2
    a = p.a_max * (free - interaction)
    return float(min(max(a, ACCEL_MIN), p.a_max))


def find_leader(tracks, route: Polyline, ego_s: float, corridor: float):
    """Nearest track ahead of the ego whose centre lies inside the corridor."""
    best = None
    for track in tracks:
        s, lateral = route.project(track.position)
        if s <= ego_s or abs(lateral) > corridor:
            continue
        if best is None or s < best[0]:
            h = route.heading_at(s)
            v_along = float(track.velocity[0] * math.cos(h) + track.velocity[1] * math.sin(h))
            best = (s, v_along, float(track.extent[0]))
    return best


def plan_idm(tracks, route: Polyline, p: IdmParams, ego: EgoView) -> Action:
    leader = find_leader(tracks, route, ego.s, p.corridor)
    if leader is None:
        a = idm_acceleration(ego.speed, math.inf, 0.0, p, ego.v_target)
        return Action(accel=a, v_target=ego.v_target, note="free")
    s_lead, v_lead, length = leader
    gap = s_lead - ego.s - 0.5 * (ego.length + length)
    a = idm_acceleration(ego.speed, gap, v_lead, p, ego.v_target)
    return Action(accel=a, v_target=ego.v_target, lead_s=s_lead, lead_v=v_lead,
                  lead_length=length, note="follow")


def ego_conflict_times(ego: EgoView, m: ManeuverSpec) -> tuple[float, float]:
    """Times for the ego front to reach the conflict span and its rear to clear it."""

    def time_to(distance: float) -> float:
        if distance <= 0.0:
            return 0.0
        v, a, vmax = ego.speed, m.go_accel, max(ego.v_target, 1e-3)
        if v >= vmax:
            return distance / v
        d_acc = (vmax * vmax - v * v) / (2.0 * a)
        if distance <= d_acc:
            return (-v + math.sqrt(v * v + 2.0 * a * distance)) / a
        return (vmax - v) / a + (distance - d_acc) / vmax

    half = 0.5 * ego.length
    return time_to(m.conflict_start - (ego.s + half)), time_to(m.conflict_end + half - ego.s)


def track_conflict_window(track, zone: np.ndarray, m: ManeuverSpec, step: float = 0.1):
    """First and last predicted times the track centre is inside the conflict zone.

    Returns ``None`` when the constant-velocity prediction never enters the
    zone within the horizon; ``last`` is ``inf`` if it is still inside at the
    horizon.
    """
    taus = np.arange(0.0, m.horizon_s + 0.5 * step, step)
    pred = np.asarray(track.position)[None, :] + taus[:, None] * np.asarray(track.velocity)[None, :]
    dist = np.min(np.linalg.norm(pred[:, None, :] - zone[None, :, :], axis=2), axis=1)
    inside = dist <= m.conflict_radius
    if not inside.any():
        return None
    idx = np.flatnonzero(inside)
    last = math.inf if inside[-1] else float(taus[idx[-1]])
    return float(taus[idx[0]]), last


def time_gap(track, zone: np.ndarray, ego: EgoView, m: ManeuverSpec) -> float:
    window = track_conflict_window(track, zone, m)
    if window is None:
        return math.inf
    t_arrive, t_leave = window
    t_enter, t_clear = ego_conflict_times(ego, m)
    return max(t_arrive - t_clear, t_enter - t_leave)


def plan_geometric(tracks, route: Polyline, m: ManeuverSpec, ego: EgoView, p: IdmParams | None = None) -> Action:
    p = p or IdmParams()
    cruise = idm_acceleration(ego.speed, math.inf, 0.0, p, ego.v_target)
    if ego.committed or ego.s > m.commit_point:
        return Action(accel=cruise, v_target=ego.v_target, go=True, note="committed")
    zone = route.sample(m.conflict_start, m.conflict_end, 1.0)
    gaps = [time_gap(t, zone, ego, m) for t in tracks]
    worst = min(gaps, default=math.inf)
    if worst > m.gap_accept_s:
        return Action(accel=cruise, v_target=ego.v_target, go=True, note="go")
    hold = stop_line_accel(ego.speed, ego.s, m.commit_point, p, ego.v_target)
    return Action(accel=min(cruise, hold), v_target=ego.v_target, stop_s=m.commit_point, go=False,
                  note=f"hold gap={worst:.2f}s")


def stop_line_accel(v: float, s: float, stop_s: float, p: IdmParams, v0: float) -> float:
    # virtual stationary obstacle placed so the IDM equilibrium is 0.2 m short of the line
    return idm_acceleration(v, stop_s - s + p.s0 - 0.2, 0.0, p, v0)


def longitudinal_command(action: Action, s: float, v: float, elapsed: float, ego_length: float,
                         p: IdmParams) -> float:
    """Per-frame execution of a held action using the ego's own state."""
    v0 = max(action.v_target, 1e-3)
    if action.lead_s is None:
        a = idm_acceleration(v, math.inf, 0.0, p, v0)
    else:
        s_lead = action.lead_s + action.lead_v * elapsed
        gap = s_lead - s - 0.5 * (ego_length + action.lead_length)
        a = idm_acceleration(v, gap, action.lead_v, p, v0)
    if action.stop_s is not None:
        a = min(a, stop_line_accel(v, s, action.stop_s, p, v0))
    return float(min(max(a, ACCEL_MIN), ACCEL_MAX))


def pure_pursuit(position, heading: float, speed: float, route: Polyline, s: float) -> float:
    lookahead = max(4.0, 0.8 * speed)
    target = route.point_at(s + lookahead)
    dx, dy = target[0] - position[0], target[1] - position[1]
    alpha = math.atan2(dy, dx) - heading
    kappa = 2.0 * math.sin(alpha) / max(math.hypot(dx, dy), 1e-6)
    return float(min(max(kappa, -CURVATURE_MAX), CURVATURE_MAX))
