"""Scenario definitions, the YAML scenario format and ground-truth generation."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .geometry import Polyline, arc_points, wrap_angle
from .planners import IdmParams, ManeuverSpec
from .tracker import TrackerParams

SCHEMA_VERSION = 1
SCENARIO_IDS = ("lane_follow", "overtake_follow", "overtake", "left_turn", "right_turn")
PLANNER_KINDS = ("idm", "geometric")


class ScenarioError(ValueError):
    """Raised when a scenario file does not match the schema."""


@dataclass(frozen=True)
class AgentState:
    agent_id: int
    position: tuple[float, float]
    heading: float
    speed: float
    extent: tuple[float, float]
    category: str = "car"

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if min(self.extent) <= 0:
            raise ValueError("extent must be positive")
        if self.category != "car":
            raise ValueError("only the 'car' category is supported")

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])


@dataclass(frozen=True)
class Lane:
    name: str
    centreline: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class EgoRoute:
    polyline: tuple[tuple[float, float], ...]
    # piecewise-constant target speed: (arclength from which it applies, speed)
    speed_profile: tuple[tuple[float, float], ...]
    initial_speed: float
    extent: tuple[float, float] = (4.5, 1.9)
    start_s: float = 0.0

    def target_speed(self, s: float) -> float:
        v = self.speed_profile[0][1]
        for s_from, speed in self.speed_profile:
            if s >= s_from:
                v = speed
        return v


@dataclass(frozen=True)
class AgentScript:
    agent_id: int
    waypoints: tuple[tuple[float, float], ...]
    speed: float
    start_s: float = 0.0
    extent: tuple[float, float] = (4.5, 1.9)


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    map: tuple[Lane, ...]
    ego_route: EgoRoute
    agent_scripts: tuple[AgentScript, ...]
    duration_T: int
    dt: float
    planner_kind: str
    idm: IdmParams = field(default_factory=IdmParams)
    maneuver: ManeuverSpec | None = None
    tracker: TrackerParams = field(default_factory=TrackerParams)
    replan_interval_s: float = 1.0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.duration_T < 2:
            raise ScenarioError("duration_T must be at least 2")
        if not self.dt > 0:
            raise ScenarioError("dt must be positive")
        if self.planner_kind not in PLANNER_KINDS:
            raise ScenarioError(f"planner_kind must be one of {PLANNER_KINDS}")
        if self.planner_kind == "geometric" and self.maneuver is None:
            raise ScenarioError("geometric planner requires a maneuver block")
        ids = [a.agent_id for a in self.agent_scripts]
        if len(set(ids)) != len(ids):
            raise ScenarioError("agent ids must be unique")

    @property
    def n_agents(self) -> int:
        return len(self.agent_scripts)

    @property
    def replan_every(self) -> int:
        return max(1, int(round(self.replan_interval_s / self.dt)))

    def route(self) -> Polyline:
        return Polyline(self.ego_route.polyline)

    def ego_initial_state(self) -> AgentState:
        route = self.route()
        s = self.ego_route.start_s
        p = route.point_at(s)
        return AgentState(
            agent_id=-1,
            position=(float(p[0]), float(p[1])),
            heading=route.heading_at(s),
            speed=self.ego_route.initial_speed,
            extent=self.ego_route.extent,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d = {"schema_version": d.pop("schema_version"), **d}
        return _plain(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def scenario_hash(scenario: Scenario) -> str:
    blob = json.dumps(scenario.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# YAML loading with line-aware errors


class _Map(dict):
    lines: dict


class _Seq(list):
    lines: list


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.lines = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    out.line = node.start_mark.line + 1
    return out


def _construct_seq(loader, node):
    out = _Seq(loader.construct_object(child, deep=True) for child in node.value)
    out.lines = [child.start_mark.line + 1 for child in node.value]
    out.line = node.start_mark.line + 1
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)
_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_seq)


def _line_of(container, key=None):
    if key is not None:
        lines = getattr(container, "lines", None)
        if isinstance(lines, dict) and key in lines:
            return lines[key]
        if isinstance(lines, list) and isinstance(key, int) and key < len(lines):
            return lines[key]
    return getattr(container, "line", None)


def _fail(msg: str, container=None, key=None):
    line = _line_of(container, key) if container is not None else None
    where = f" (line {line})" if line else ""
    raise ScenarioError(f"{msg}{where}")


def _get(m, key, path, kind=None, default=...):
    if not isinstance(m, dict):
        _fail(f"{path}: expected a mapping", m)
    if key not in m:
        if default is not ...:
            return default
        _fail(f"{path}.{key}: required field missing", m)
    value = m[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(f"{path}.{key}: expected a number, got {value!r}", m, key)
        value = float(value)
        if not math.isfinite(value):
            _fail(f"{path}.{key}: must be finite", m, key)
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(f"{path}.{key}: expected an integer, got {value!r}", m, key)
    elif kind is str:
        if not isinstance(value, str):
            _fail(f"{path}.{key}: expected a string, got {value!r}", m, key)
    return value


def _pair(value, path, container, key) -> tuple[float, float]:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    ):
        _fail(f"{path}: expected a pair of numbers, got {value!r}", container, key)
    return (float(value[0]), float(value[1]))


def _path_points(value, path, container, key) -> tuple[tuple[float, float], ...]:
    """Expand a point list which may contain ``{arc: {...}}`` items."""
    if not isinstance(value, list) or not value:
        _fail(f"{path}: expected a non-empty list of points", container, key)
    pts: list[tuple[float, float]] = []
    for i, item in enumerate(value):
        if isinstance(item, dict):
            arc = _get(item, "arc", f"{path}[{i}]")
            center = _pair(_get(arc, "center", f"{path}[{i}].arc"), f"{path}[{i}].arc.center", arc, "center")
            radius = _get(arc, "radius", f"{path}[{i}].arc", float)
            if radius <= 0:
                _fail(f"{path}[{i}].arc.radius: must be positive", arc, "radius")
            a0 = _get(arc, "from_deg", f"{path}[{i}].arc", float)
            a1 = _get(arc, "to_deg", f"{path}[{i}].arc", float)
            for p in arc_points(center, radius, a0, a1):
                pts.append((float(p[0]), float(p[1])))
        else:
            pts.append(_pair(item, f"{path}[{i}]", value, i))
    if len(pts) < 2:
        _fail(f"{path}: needs at least two points", container, key)
    try:
        Polyline(pts)
    except ValueError as exc:
        _fail(f"{path}: {exc}", container, key)
    return tuple(pts)


def _extent(m, path):
    ext = _pair(_get(m, "extent", path, default=[4.5, 1.9]), f"{path}.extent", m, "extent")
    if min(ext) <= 0:
        _fail(f"{path}.extent: components must be positive", m, "extent")
    return ext


def _dataclass_from(cls, m, path):
    if m is None:
        return cls()
    if not isinstance(m, dict):
        _fail(f"{path}: expected a mapping", m)
    known = cls.__dataclass_fields__
    kwargs = {}
    for key, value in m.items():
        if key not in known:
            _fail(f"{path}.{key}: unknown field", m, key)
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        _fail(f"{path}: {exc}", m)


def scenario_from_dict(doc) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario file must contain a mapping at top level")
    version = _get(doc, "schema_version", "scenario", int)
    if version != SCHEMA_VERSION:
        _fail(f"scenario.schema_version: unsupported version {version}", doc, "schema_version")
    sid = _get(doc, "scenario_id", "scenario", str)
    if sid not in SCENARIO_IDS:
        _fail(f"scenario.scenario_id: must be one of {SCENARIO_IDS}, got {sid!r}", doc, "scenario_id")
    duration = _get(doc, "duration_T", "scenario", int)
    if duration < 2:
        _fail("scenario.duration_T: must be >= 2", doc, "duration_T")
    dt = _get(doc, "dt", "scenario", float)
    if dt <= 0:
        _fail("scenario.dt: must be > 0", doc, "dt")
    kind = _get(doc, "planner_kind", "scenario", str)
    if kind not in PLANNER_KINDS:
        _fail(f"scenario.planner_kind: must be one of {PLANNER_KINDS}", doc, "planner_kind")

    lanes = []
    map_doc = _get(doc, "map", "scenario", default=[])
    if not isinstance(map_doc, list):
        _fail("scenario.map: expected a list of lanes", doc, "map")
    for i, lane in enumerate(map_doc):
        p = f"scenario.map[{i}]"
        lanes.append(Lane(
            name=_get(lane, "name", p, str),
            centreline=_path_points(_get(lane, "centreline", p), f"{p}.centreline", lane, "centreline"),
        ))

    r = _get(doc, "ego_route", "scenario")
    profile_doc = _get(r, "speed_profile", "scenario.ego_route")
    if isinstance(profile_doc, (int, float)) and not isinstance(profile_doc, bool):
        profile = ((0.0, float(profile_doc)),)
    else:
        if not isinstance(profile_doc, list) or not profile_doc:
            _fail("scenario.ego_route.speed_profile: expected a number or list of [s, v]", r, "speed_profile")
        profile = tuple(
            _pair(item, f"scenario.ego_route.speed_profile[{i}]", profile_doc, i)
            for i, item in enumerate(profile_doc)
        )
    if any(v < 0 for _, v in profile):
        _fail("scenario.ego_route.speed_profile: speeds must be >= 0", r, "speed_profile")
    route = EgoRoute(
        polyline=_path_points(_get(r, "polyline", "scenario.ego_route"), "scenario.ego_route.polyline", r, "polyline"),
        speed_profile=profile,
        initial_speed=_get(r, "initial_speed", "scenario.ego_route", float),
        extent=_extent(r, "scenario.ego_route"),
        start_s=_get(r, "start_s", "scenario.ego_route", float, default=0.0),
    )
    if route.initial_speed < 0:
        _fail("scenario.ego_route.initial_speed: must be >= 0", r, "initial_speed")

    scripts = []
    agents_doc = _get(doc, "agent_scripts", "scenario", default=[])
    if not isinstance(agents_doc, list):
        _fail("scenario.agent_scripts: expected a list", doc, "agent_scripts")
    for i, a in enumerate(agents_doc):
        p = f"scenario.agent_scripts[{i}]"
        speed = _get(a, "speed", p, float)
        if speed < 0:
            _fail(f"{p}.speed: must be >= 0", a, "speed")
        scripts.append(AgentScript(
            agent_id=_get(a, "agent_id", p, int),
            waypoints=_path_points(_get(a, "waypoints", p), f"{p}.waypoints", a, "waypoints"),
            speed=speed,
            start_s=_get(a, "start_s", p, float, default=0.0),
            extent=_extent(a, p),
        ))

    planner = _get(doc, "planner", "scenario", default=None) or {}
    idm = _dataclass_from(IdmParams, planner.get("idm"), "scenario.planner.idm")
    maneuver = None
    if planner.get("maneuver") is not None:
        maneuver = _dataclass_from(ManeuverSpec, planner["maneuver"], "scenario.planner.maneuver")
    if kind == "geometric" and maneuver is None:
        _fail("scenario.planner.maneuver: required for the geometric planner", doc, "planner")
    replan = planner.get("replan_interval_s", 1.0)
    tracker = _dataclass_from(TrackerParams, _get(doc, "tracker", "scenario", default=None), "scenario.tracker")

    return Scenario(
        scenario_id=sid,
        map=tuple(lanes),
        ego_route=route,
        agent_scripts=tuple(scripts),
        duration_T=duration,
        dt=dt,
        planner_kind=kind,
        idm=idm,
        maneuver=maneuver,
        tracker=tracker,
        replan_interval_s=float(replan),
        schema_version=version,
    )


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("advperc") / "scenarios" / f"{name}.yaml"))


def resolve_scenario_path(name_or_path) -> Path:
    """Accept either a bundled scenario id or a filesystem path."""
    if str(name_or_path) in SCENARIO_IDS:
        return bundled_path(str(name_or_path))
    return Path(name_or_path)


def load_scenario(spec_file) -> Scenario:
    path = resolve_scenario_path(spec_file)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: invalid YAML: {exc}") from exc
    try:
        return scenario_from_dict(doc)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def save_scenario(scenario: Scenario, path) -> None:
    d = scenario.to_dict()
    planner = {"idm": d.pop("idm"), "replan_interval_s": d.pop("replan_interval_s")}
    maneuver = d.pop("maneuver")
    if maneuver is not None:
        planner["maneuver"] = maneuver
    d["planner"] = planner
    d["ego_route"]["speed_profile"] = [list(p) for p in scenario.ego_route.speed_profile]
    Path(path).write_text(yaml.safe_dump(d, sort_keys=False, default_flow_style=None))


def load_all_bundled() -> dict[str, Scenario]:
    return {name: load_scenario(name) for name in SCENARIO_IDS}


# ---------------------------------------------------------------------------
# Ground truth


@dataclass
class GroundTruthSequence:
    """World states over a rollout, stored as arrays indexed (frame, agent).

    ``ego`` holds one AgentState per frame.  For the output of
    ``generate_ground_truth`` this is the nominal ego (route at its initial
    speed); rollouts substitute the ego trajectory they actually produced.
    """

    timestamps: np.ndarray  # (T,)
    ego: list[AgentState]
    agent_ids: np.ndarray  # (d,)
    positions: np.ndarray  # (T, d, 2)
    headings: np.ndarray  # (T, d)
    speeds: np.ndarray  # (T, d)
    extents: np.ndarray  # (d, 2)

    @property
    def T(self) -> int:
        return len(self.timestamps)

    @property
    def d(self) -> int:
        return len(self.agent_ids)

    @property
    def velocities(self) -> np.ndarray:
        return self.speeds[..., None] * np.stack([np.cos(self.headings), np.sin(self.headings)], axis=-1)

    def agent_state(self, t: int, j: int) -> AgentState:
        return AgentState(
            agent_id=int(self.agent_ids[j]),
            position=(float(self.positions[t, j, 0]), float(self.positions[t, j, 1])),
            heading=float(self.headings[t, j]),
            speed=float(self.speeds[t, j]),
            extent=(float(self.extents[j, 0]), float(self.extents[j, 1])),
        )

    @property
    def frames(self) -> list[tuple[float, AgentState, list[AgentState]]]:
        return [
            (float(self.timestamps[t]), self.ego[t], [self.agent_state(t, j) for j in range(self.d)])
            for t in range(self.T)
        ]

    def with_ego(self, ego: list[AgentState]) -> "GroundTruthSequence":
        if len(ego) != self.T:
            raise ValueError("ego trajectory length must equal the frame count")
        return GroundTruthSequence(self.timestamps, list(ego), self.agent_ids, self.positions,
                                   self.headings, self.speeds, self.extents)

    def ego_positions(self) -> np.ndarray:
        return np.array([e.position for e in self.ego])

    def ego_headings(self) -> np.ndarray:
        return np.array([e.heading for e in self.ego])


def generate_ground_truth(scenario: Scenario) -> GroundTruthSequence:
    T, d, dt = scenario.duration_T, scenario.n_agents, scenario.dt
    times = np.arange(T) * dt
    positions = np.zeros((T, d, 2))
    headings = np.zeros((T, d))
    speeds = np.zeros((T, d))
    for j, script in enumerate(scenario.agent_scripts):
        line = Polyline(script.waypoints)
        for t in range(T):
            s = script.start_s + script.speed * (t * dt)
            positions[t, j] = line.point_at(s)
            headings[t, j] = line.heading_at(s)
        speeds[:, j] = script.speed
    headings = wrap_angle(headings) if d else headings
    extents = np.array([s.extent for s in scenario.agent_scripts], dtype=float).reshape(d, 2)
    ids = np.array([s.agent_id for s in scenario.agent_scripts], dtype=int)

    route = scenario.route()
    e0 = scenario.ego_initial_state()
    ego = []
    for t in range(T):
        s = scenario.ego_route.start_s + e0.speed * (t * dt)
        p = route.point_at(s)
        ego.append(AgentState(-1, (float(p[0]), float(p[1])), route.heading_at(s), e0.speed, e0.extent))
    return GroundTruthSequence(times, ego, ids, positions, headings, speeds, extents)
