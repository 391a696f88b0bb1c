"""Perception error parameterisation and the attack function.

An error sequence holds, for every frame and agent, an additive position
error, an additive heading error and a false-negative switch.  Applying it
to a ground-truth sequence yields the perceived detections.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import wrap_angle
from .scenario import GroundTruthSequence
from .tracker import Detection

ERROR_FORMAT = "advperc-errors"
ERROR_FORMAT_VERSION = 1


@dataclass(frozen=True)
class AgentError:
    dx: tuple[float, float] = (0.0, 0.0)
    dphi: float = 0.0
    fn: bool = False


class ErrorSequence:
    """Errors for ``T`` frames and ``d`` agents, stored column-wise.

    Position and heading errors of false-negative entries are zeroed on
    construction since they have no effect.
    """

    def __init__(self, dx, dphi, fn):
        dx = np.array(dx, dtype=float)
        dphi = np.array(dphi, dtype=float)
        fn = np.array(fn, dtype=bool)
        if dx.ndim != 3 or dx.shape[2] != 2 or dphi.shape != dx.shape[:2] or fn.shape != dx.shape[:2]:
            raise ValueError("error arrays must have shapes (T, d, 2), (T, d), (T, d)")
        if not (np.isfinite(dx).all() and np.isfinite(dphi).all()):
            raise ValueError("error components must be finite")
        dx[fn] = 0.0
        dphi[fn] = 0.0
        self.dx, self.dphi, self.fn = dx, dphi, fn

    @classmethod
    def zeros(cls, T: int, d: int) -> "ErrorSequence":
        return cls(np.zeros((T, d, 2)), np.zeros((T, d)), np.zeros((T, d), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.fn.shape

    @property
    def T(self) -> int:
        return self.fn.shape[0]

    @property
    def d(self) -> int:
        return self.fn.shape[1]

    def __getitem__(self, idx) -> AgentError:
        t, j = idx
        return AgentError((float(self.dx[t, j, 0]), float(self.dx[t, j, 1])), float(self.dphi[t, j]),
                          bool(self.fn[t, j]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ErrorSequence):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.fn, other.fn)
                and np.array_equal(self.dx, other.dx) and np.array_equal(self.dphi, other.dphi))

    def __repr__(self) -> str:
        return f"ErrorSequence(T={self.T}, d={self.d}, fn={self.fn_count})"

    def copy(self) -> "ErrorSequence":
        return ErrorSequence(self.dx, self.dphi, self.fn)

    @property
    def fn_count(self) -> int:
        return int(self.fn.sum())

    @property
    def tp_count(self) -> int:
        return int((~self.fn).sum())

    def key(self) -> bytes:
        """Hashable byte fingerprint, used to cache rollouts."""
        return self.fn.tobytes() + self.dx.tobytes() + self.dphi.tobytes()

    def fn_runs(self) -> list[tuple[int, int, int]]:
        """All maximal false-negative runs as ``(agent, start, end)``, inclusive."""
        runs = []
        for j in range(self.d):
            col = self.fn[:, j]
            t = 0
            while t < self.T:
                if col[t]:
                    start = t
                    while t + 1 < self.T and col[t + 1]:
                        t += 1
                    runs.append((j, start, t))
                t += 1
        return runs

    def mean_position_error(self) -> float:
        detected = ~self.fn
        if not detected.any():
            return 0.0
        return float(np.linalg.norm(self.dx[detected], axis=1).mean())

    def mean_abs_orientation_error(self) -> float:
        detected = ~self.fn
        if not detected.any():
            return 0.0
        return float(np.abs(wrap_angle(self.dphi[detected])).mean())

    # -- serialisation ---------------------------------------------------

    def to_dict(self, scenario_id: str = "", scenario_hash: str = "", agent_ids=None) -> dict:
        ids = list(range(self.d)) if agent_ids is None else [int(a) for a in agent_ids]
        return {
            "format": ERROR_FORMAT,
            "version": ERROR_FORMAT_VERSION,
            "scenario_id": scenario_id,
            "scenario_hash": scenario_hash,
            "T": self.T,
            "d": self.d,
            "agents": [
                {
                    "agent_id": ids[j],
                    "dx": self.dx[:, j, 0].tolist(),
                    "dy": self.dx[:, j, 1].tolist(),
                    "dphi": self.dphi[:, j].tolist(),
                    "fn": "".join("1" if f else "0" for f in self.fn[:, j]),
                }
                for j in range(self.d)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ErrorSequence":
        if doc.get("format") != ERROR_FORMAT:
            raise ValueError("not an error-sequence file")
        if doc.get("version") != ERROR_FORMAT_VERSION:
            raise ValueError(f"unsupported error-sequence version {doc.get('version')}")
        T, d = int(doc["T"]), int(doc["d"])
        dx = np.zeros((T, d, 2))
        dphi = np.zeros((T, d))
        fn = np.zeros((T, d), dtype=bool)
        agents = doc["agents"]
        if len(agents) != d:
            raise ValueError("agent count does not match header")
        for j, col in enumerate(agents):
            if not (len(col["dx"]) == len(col["dy"]) == len(col["dphi"]) == len(col["fn"]) == T):
                raise ValueError(f"column length mismatch for agent {col.get('agent_id')}")
            dx[:, j, 0] = col["dx"]
            dx[:, j, 1] = col["dy"]
            dphi[:, j] = col["dphi"]
            fn[:, j] = [c == "1" for c in col["fn"]]
        return cls(dx, dphi, fn)


def save_errors(e: ErrorSequence, path, scenario=None) -> None:
    from .scenario import scenario_hash  # noqa: PLC0415

    header = {}
    if scenario is not None:
        header = dict(
            scenario_id=scenario.scenario_id,
            scenario_hash=scenario_hash(scenario),
            agent_ids=[a.agent_id for a in scenario.agent_scripts],
        )
    Path(path).write_text(json.dumps(e.to_dict(**header), separators=(",", ":")) + "\n")


def load_errors(path, scenario=None) -> ErrorSequence:
    doc = json.loads(Path(path).read_text())
    e = ErrorSequence.from_dict(doc)
    if scenario is not None:
        from .scenario import scenario_hash  # noqa: PLC0415

        expected = scenario_hash(scenario)
        if doc.get("scenario_hash") and doc["scenario_hash"] != expected:
            raise ValueError(
                f"error file was produced for scenario hash {doc['scenario_hash']}, not {expected}"
            )
        check_dimensions(e, scenario.duration_T, scenario.n_agents)
    return e


def check_dimensions(e: ErrorSequence, T: int, d: int) -> None:
    if e.shape != (T, d):
        raise ValueError(f"error sequence has shape {e.shape}, expected ({T}, {d})")


@dataclass
class PerceivedSequence:
    """Perceived boxes, one slot per ground-truth agent, masked by ``present``.

    ``agent_ids`` is kept for metric bookkeeping only; ``detections`` hands
    the tracker anonymous boxes.
    """

    timestamps: np.ndarray
    agent_ids: np.ndarray
    positions: np.ndarray  # (T, d, 2)
    headings: np.ndarray  # (T, d)
    present: np.ndarray  # (T, d) bool
    extents: np.ndarray  # (d, 2)
    velocities: np.ndarray  # (T, d, 2)

    @property
    def T(self) -> int:
        return len(self.timestamps)

    @property
    def d(self) -> int:
        return len(self.agent_ids)

    def detections(self, t: int) -> list[Detection]:
        out = []
        for j in np.flatnonzero(self.present[t]):
            out.append(Detection(
                position=(float(self.positions[t, j, 0]), float(self.positions[t, j, 1])),
                heading=float(self.headings[t, j]),
                extent=(float(self.extents[j, 0]), float(self.extents[j, 1])),
                velocity=(float(self.velocities[t, j, 0]), float(self.velocities[t, j, 1])),
            ))
        return out

    @property
    def frames(self) -> list[list[dict]]:
        """Per-frame detection lists including the source agent id."""
        return [
            [
                {
                    "agent_id": int(self.agent_ids[j]),
                    "position": tuple(float(v) for v in self.positions[t, j]),
                    "heading": float(self.headings[t, j]),
                }
                for j in np.flatnonzero(self.present[t])
            ]
            for t in range(self.T)
        ]


def apply_errors(y: GroundTruthSequence, e: ErrorSequence) -> PerceivedSequence:
    check_dimensions(e, y.T, y.d)
    present = ~e.fn
    positions = np.where(present[..., None], y.positions + e.dx, np.nan)
    headings = np.where(present, wrap_angle(y.headings + e.dphi) if y.d else y.headings, np.nan)
    return PerceivedSequence(
        timestamps=y.timestamps,
        agent_ids=y.agent_ids,
        positions=positions,
        headings=headings,
        present=present,
        extents=y.extents,
        velocities=y.velocities,
    )


def full_drop_error(j: int, T: int, d: int) -> ErrorSequence:
    if not 0 <= j < d:
        raise IndexError(f"agent index {j} out of range for {d} agents")
    e = ErrorSequence.zeros(T, d)
    e.fn[:, j] = True
    return e


def segment_drop_error(j: int, t1: int, t2: int, T: int, d: int) -> ErrorSequence:
    if not 0 <= j < d:
        raise IndexError(f"agent index {j} out of range for {d} agents")
    if not 0 <= t1 <= t2 < T:
        raise ValueError(f"invalid drop interval [{t1}, {t2}] for {T} frames")
    e = ErrorSequence.zeros(T, d)
    e.fn[t1:t2 + 1, j] = True
    return e


def perturb(e: ErrorSequence, strength: float, seed: int) -> ErrorSequence:
    """Flip each false-negative flag with probability ``strength`` and add
    isotropic Gaussian position noise (std ``strength`` metres) to every
    detected entry."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    flips = rng.random(e.shape) < strength
    noise = rng.normal(0.0, 1.0, size=e.dx.shape) * strength
    fn = e.fn ^ flips
    dx = np.where(fn[..., None], 0.0, e.dx + noise)
    return ErrorSequence(dx, e.dphi, fn)
