"""Kalman-filter multi-object tracker with Hungarian centre-distance association.

State per track is ``(x, y, cos(theta), sin(theta), vx, vy, wc, ws)``: a
constant-velocity model on position and on the unit orientation vector.
The orientation vector is re-normalised after every predict and update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

_BIG = 1e6


@dataclass(frozen=True)
class TrackerParams:
    # Noise magnitudes are tuned for the bundled scenarios, not taken from a reference.
    process_std: tuple = (0.5, 0.5, 0.1, 0.1, 1.0, 1.0, 0.5, 0.5)  # per sqrt(second)
    measurement_std: tuple = (0.3, 0.3, 0.1, 0.1)
    gate: float = 2.0  # metres, centre distance
    max_age: float = 1.0  # seconds unobserved before deletion
    init_inflation: float = 1000.0  # velocity variance multiplier for new tracks, SORT-style


@dataclass(frozen=True)
class Detection:
    position: tuple[float, float]
    heading: float
    extent: tuple[float, float]
    velocity: tuple[float, float]


@dataclass
class Track:
    track_id: int
    mean: np.ndarray
    covariance: np.ndarray
    extent: tuple[float, float]
    velocity_hint: tuple[float, float]
    misses: int = 0
    dt: float = 0.1
    confirmed: bool = True

    @property
    def time_since_update(self) -> float:
        return self.misses * self.dt

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[4:6]

    @property
    def heading(self) -> float:
        return math.atan2(self.mean[3], self.mean[2])

    def snapshot(self) -> "Track":
        return Track(self.track_id, self.mean.copy(), self.covariance.copy(), self.extent,
                     self.velocity_hint, self.misses, self.dt, self.confirmed)


def _normalise_orientation(mean: np.ndarray) -> None:
    n = math.hypot(mean[2], mean[3])
    if n > 1e-12:
        mean[2] /= n
        mean[3] /= n
    else:
        mean[2], mean[3] = 1.0, 0.0


def associate(tracks, detections, gate: float = 2.0):
    """Hungarian assignment on centre distance with a hard gate.

    Infeasible pairs (distance above ``gate``) get a prohibitive cost, so the
    result first maximises the number of gated matches and then minimises
    their total distance.  Returns ``(pairs, unmatched_tracks,
    unmatched_detections)`` with index pairs ``(track_idx, det_idx)``.
    """
    n, m = len(tracks), len(detections)
    if n == 0 or m == 0:
        return [], list(range(n)), list(range(m))
    tp = np.array([np.asarray(t.position if hasattr(t, "position") else t, dtype=float)[:2] for t in tracks])
    dp = np.array([np.asarray(d.position if hasattr(d, "position") else d, dtype=float)[:2] for d in detections])
    cost = np.linalg.norm(tp[:, None, :] - dp[None, :, :], axis=2)
    feasible = cost <= gate
    rows, cols = linear_sum_assignment(np.where(feasible, cost, _BIG))
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if feasible[r, c]]
    mt = {r for r, _ in pairs}
    md = {c for _, c in pairs}
    return pairs, [i for i in range(n) if i not in mt], [j for j in range(m) if j not in md]


class Tracker:
    """Single-owner tracker; call ``step`` once per frame."""

    def __init__(self, params: TrackerParams | None = None, dt: float = 0.1):
        self.params = params or TrackerParams()
        self.dt = dt
        self.tracks: list[Track] = []
        self._next_id = 0
        self._H = np.hstack([np.eye(4), np.zeros((4, 4))])
        self._R = np.diag(np.square(self.params.measurement_std))
        self._q_rate = np.diag(np.square(self.params.process_std))
        self._set_dt(dt)

    def _set_dt(self, dt: float) -> None:
        self.dt = dt
        F = np.eye(8)
        F[:4, 4:] = dt * np.eye(4)
        self._F = F
        self._Q = self._q_rate * dt

    def _spawn(self, det: Detection) -> Track:
        c, s = math.cos(det.heading), math.sin(det.heading)
        mean = np.array([det.position[0], det.position[1], c, s, det.velocity[0], det.velocity[1], 0.0, 0.0])
        r = np.square(self.params.measurement_std)
        unobserved = self.params.init_inflation * r
        cov = np.diag(np.concatenate([r, unobserved]))
        track = Track(self._next_id, mean, cov, det.extent, det.velocity, dt=self.dt)
        self._next_id += 1
        return track

    def _predict(self, track: Track) -> None:
        track.mean = self._F @ track.mean
        _normalise_orientation(track.mean)
        P = self._F @ track.covariance @ self._F.T + self._Q
        track.covariance = 0.5 * (P + P.T)

    def _update(self, track: Track, det: Detection) -> None:
        z = np.array([det.position[0], det.position[1], math.cos(det.heading), math.sin(det.heading)])
        H, P = self._H, track.covariance
        S = H @ P @ H.T + self._R
        K = np.linalg.solve(S, H @ P).T
        track.mean = track.mean + K @ (z - H @ track.mean)
        _normalise_orientation(track.mean)
        IKH = np.eye(8) - K @ H
        P = IKH @ P @ IKH.T + K @ self._R @ K.T  # Joseph form
        track.covariance = 0.5 * (P + P.T)
        track.extent = det.extent
        track.velocity_hint = det.velocity
        track.misses = 0

    def step(self, detections, dt: float | None = None) -> list[Track]:
        """Advance one frame and return snapshots of the confirmed tracks."""
        if dt is not None and dt != self.dt:
            if dt <= 0:
                raise ValueError("dt must be positive")
            self._set_dt(dt)
        for track in self.tracks:
            self._predict(track)
            track.dt = self.dt
        pairs, unmatched_t, unmatched_d = associate(self.tracks, detections, self.params.gate)
        for ti, di in pairs:
            self._update(self.tracks[ti], detections[di])
        for ti in unmatched_t:
            self.tracks[ti].misses += 1
        for di in unmatched_d:
            self.tracks.append(self._spawn(detections[di]))
        limit = self.params.max_age + 1e-9
        self.tracks = [t for t in self.tracks if t.time_since_update <= limit]
        return [t.snapshot() for t in self.tracks if t.confirmed]


def step(state: Tracker, detections, dt: float):
    """Functional form: returns ``(state, confirmed_tracks)``."""
    confirmed = state.step(detections, dt)
    return state, confirmed
