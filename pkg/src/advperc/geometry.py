"""Planar geometry helpers: angles, polylines and oriented rectangles."""

from __future__ import annotations

import math

import numpy as np


def wrap_angle(theta):
    """Normalise an angle (or array of angles) to (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def box_corners(center, heading: float, length: float, width: float) -> np.ndarray:
    """Corners of an oriented rectangle, counter-clockwise, shape (4, 2)."""
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center, dtype=float)


def _edge_axes(corners: np.ndarray) -> np.ndarray:
    edges = np.roll(corners, -1, axis=0) - corners
    axes = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    return axes[:2]  # rectangles: two unique normals


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    u = 0.0 if denom == 0.0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(a + u * ab - p))


def polygon_distance(pa: np.ndarray, pb: np.ndarray) -> float:
    """Euclidean distance between two non-overlapping convex polygons."""
    best = math.inf
    for poly, other in ((pa, pb), (pb, pa)):
        n = len(other)
        for p in poly:
            for k in range(n):
                best = min(best, _point_segment_distance(p, other[k], other[(k + 1) % n]))
    return best


def signed_separation(ca: np.ndarray, cb: np.ndarray) -> float:
    """Signed separation between two rectangles given as corner arrays.

    Positive values are the clearance between the shapes.  When they
    overlap the result is minus the smallest separating-axis overlap, i.e.
    the penetration depth.
    """
    min_overlap = math.inf
    for axis in np.vstack([_edge_axes(ca), _edge_axes(cb)]):
        pa, pb = ca @ axis, cb @ axis
        overlap = min(pa.max(), pb.max()) - max(pa.min(), pb.min())
        if overlap <= 0.0:
            return polygon_distance(ca, cb)
        min_overlap = min(min_overlap, overlap)
    return -float(min_overlap)


def box_separation(center_a, heading_a, extent_a, center_b, heading_b, extent_b) -> float:
    return signed_separation(
        box_corners(center_a, heading_a, *extent_a),
        box_corners(center_b, heading_b, *extent_b),
    )


def arc_points(center, radius: float, from_deg: float, to_deg: float, step: float = 1.0) -> np.ndarray:
    """Points on a circular arc, endpoints included, spaced about ``step`` metres."""
    a0, a1 = math.radians(from_deg), math.radians(to_deg)
    n = max(2, int(math.ceil(abs(a1 - a0) * radius / step)) + 1)
    ang = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)


class Polyline:
    """Arclength-parameterised polyline; evaluation extrapolates past both ends."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("polyline needs at least two 2-D points")
        seg = np.diff(pts, axis=0)
        seglen = np.linalg.norm(seg, axis=1)
        keep = np.concatenate([[True], seglen > 1e-9])
        pts = pts[keep]
        if len(pts) < 2:
            raise ValueError("polyline has zero length")
        self.points = pts
        seg = np.diff(pts, axis=0)
        self._seglen = np.linalg.norm(seg, axis=1)
        self._dirs = seg / self._seglen[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(self._seglen)])
        self.length = float(self.cum[-1])

    def _segment(self, s: float) -> int:
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        return min(max(i, 0), len(self._seglen) - 1)

    def point_at(self, s: float) -> np.ndarray:
        i = self._segment(s)
        return self.points[i] + (s - self.cum[i]) * self._dirs[i]

    def heading_at(self, s: float) -> float:
        d = self._dirs[self._segment(s)]
        return math.atan2(d[1], d[0])

    def project(self, p) -> tuple[float, float]:
        """Arclength of the closest point and signed lateral offset (left positive)."""
        p = np.asarray(p, dtype=float)
        rel = p - self.points[:-1]
        u = np.einsum("ij,ij->i", rel, self._dirs)
        # first and last segments extend to infinity
        lo = np.zeros_like(u)
        hi = self._seglen.copy()
        lo[0] = -np.inf
        hi[-1] = np.inf
        u = np.clip(u, lo, hi)
        foot = self.points[:-1] + u[:, None] * self._dirs
        dist = np.linalg.norm(p - foot, axis=1)
        i = int(np.argmin(dist))
        d = self._dirs[i]
        r = p - foot[i]
        lateral = d[0] * r[1] - d[1] * r[0]
        return float(self.cum[i] + u[i]), float(lateral)

    def sample(self, s0: float, s1: float, step: float = 1.0) -> np.ndarray:
        n = max(2, int(math.ceil((s1 - s0) / step)) + 1)
        return np.array([self.point_at(s) for s in np.linspace(s0, s1, n)])
