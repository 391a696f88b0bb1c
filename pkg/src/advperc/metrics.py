"""Perception quality scores on a whole sequence.

Detections are matched to ground truth greedily by ascending centre
distance, per frame, at the thresholds {0.5, 1, 2, 4} m.  Because every
detection carries the same confidence, the precision/recall curve of a
threshold collapses to a single point and AP is the area under that step,
``precision * recall``.  Translation and orientation errors are averaged
over the true positives at 2 m.  Scale, velocity and attribute errors are
zero by construction (extent and velocity are passed through from ground
truth), so they contribute their maximal ``1 - 0`` terms.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ErrorSequence, PerceivedSequence, apply_errors
from .geometry import wrap_angle
from .scenario import GroundTruthSequence

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
ZERO_TP_MTP_TERMS = 3  # ASE, AVE and AAE are identically zero here


@dataclass
class MatchResult:
    """Greedy matches of a whole sequence, stored as flat arrays.

    Matching is computed once at the largest threshold.  Greedy acceptance
    visits candidate pairs in ascending distance, so the matches at a smaller
    threshold are exactly those with ``distance <= threshold``.  Detections
    are indexed by their perception slot.
    """

    thresholds: tuple[float, ...]
    n_truth: np.ndarray  # (T,)
    n_det: np.ndarray  # (T,)
    frame: np.ndarray  # per match
    truth: np.ndarray
    detection: np.ndarray
    distance: np.ndarray
    presence: np.ndarray  # (T, d) truth matched at TP_THRESHOLD
    translation_errors: np.ndarray  # per TP at TP_THRESHOLD
    orientation_errors: np.ndarray

    @property
    def T(self) -> int:
        return len(self.n_truth)

    def tp_pairs(self, t: int, threshold: float) -> list[tuple[int, int]]:
        sel = (self.frame == t) & (self.distance <= threshold)
        return sorted(zip(self.truth[sel].tolist(), self.detection[sel].tolist()))

    def counts(self, threshold: float) -> tuple[int, int, int]:
        """Total ``(TP, FN, FP)`` over the sequence at ``threshold``."""
        tp = int(np.count_nonzero(self.distance <= threshold))
        return tp, int(self.n_truth.sum()) - tp, int(self.n_det.sum()) - tp

    def false_negatives(self, t: int, threshold: float) -> list[int]:
        matched = {i for i, _ in self.tp_pairs(t, threshold)}
        return [i for i in range(int(self.n_truth[t])) if i not in matched]


@dataclass
class MetricReport:
    nds: float
    nds_t: float
    map: float
    ate: float
    aoe: float
    longest_drop_fraction: float
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def greedy_match(dist: np.ndarray, limit: float) -> list[tuple[int, int, float]]:
    """Greedy assignment on one frame's distance matrix (``inf`` = absent)."""
    n, m = dist.shape
    if n == 0 or m == 0:
        return []
    used_t, used_d, out = set(), set(), []
    for f in np.argsort(dist, axis=None, kind="stable"):
        i, k = divmod(int(f), m)
        dv = float(dist[i, k])
        if dv > limit:
            break
        if i in used_t or k in used_d:
            continue
        used_t.add(i)
        used_d.add(k)
        out.append((i, k, dv))
    return out


def match(y: GroundTruthSequence, y_hat: PerceivedSequence, thresholds=THRESHOLDS) -> MatchResult:
    """Match perceived boxes to ground truth, frame by frame."""
    if y.T != y_hat.T:
        raise ValueError(f"sequence lengths differ: truth has {y.T} frames, perception {y_hat.T}")
    if y.d != y_hat.d:
        raise ValueError(f"agent slots differ: truth has {y.d}, perception {y_hat.d}")
    thresholds = tuple(sorted(float(t) for t in thresholds))
    limit = thresholds[-1]
    T, d = y.T, y.d
    diff = y.positions[:, :, None, :] - y_hat.positions[:, None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    dist = np.where(y_hat.present[:, None, :], dist, np.inf)
    cand = dist <= limit
    # frames where no truth or detection has two candidates need no greedy pass
    ambiguous = (cand.sum(axis=2) > 1).any(axis=1) | (cand.sum(axis=1) > 1).any(axis=1)
    ft, fi, fk = np.nonzero(cand & ~ambiguous[:, None, None])
    parts = [(ft, fi, fk, dist[ft, fi, fk])]
    for t in np.flatnonzero(ambiguous):
        g = greedy_match(dist[t], limit)
        parts.append((np.full(len(g), t), np.array([p[0] for p in g], dtype=int),
                      np.array([p[1] for p in g], dtype=int), np.array([p[2] for p in g])))
    frame, truth, det, dd = (np.concatenate(c) for c in zip(*parts))
    order = np.lexsort((truth, frame))
    frame, truth, det, dd = frame[order], truth[order], det[order], dd[order]
    tp = dd <= TP_THRESHOLD
    presence = np.zeros((T, d), dtype=bool)
    presence[frame[tp], truth[tp]] = True
    oerr = np.abs(wrap_angle(y_hat.headings[frame[tp], det[tp]] - y.headings[frame[tp], truth[tp]]))
    return MatchResult(
        thresholds=thresholds,
        n_truth=np.full(T, d, dtype=int),
        n_det=y_hat.present.sum(axis=1).astype(int),
        frame=frame.astype(int),
        truth=truth.astype(int),
        detection=det.astype(int),
        distance=dd.astype(float),
        presence=presence,
        translation_errors=dd[tp].astype(float),
        orientation_errors=np.asarray(oerr, dtype=float),
    )


def average_precision(result: MatchResult, threshold: float) -> float:
    tp, fn, fp = result.counts(threshold)
    if tp == 0:
        return 0.0
    return (tp / (tp + fp)) * (tp / (tp + fn))


def mean_ap(result: MatchResult) -> float:
    return float(np.mean([average_precision(result, th) for th in result.thresholds]))


def tp_errors(result: MatchResult) -> tuple[float, float]:
    """Mean translation (m) and orientation (rad) error of the 2 m true positives.

    With no true positives both are undefined; they are reported as 1, the
    worst value after clipping, so the terms contribute nothing to NDS.
    """
    if result.translation_errors.size == 0:
        return 1.0, 1.0
    return float(result.translation_errors.mean()), float(result.orientation_errors.mean())


def nds_from_parts(map_: float, ate: float, aoe: float) -> float:
    terms = (1.0 - min(1.0, ate)) + (1.0 - min(1.0, aoe)) + ZERO_TP_MTP_TERMS
    return (5.0 * map_ + terms) / 10.0


def longest_run(mask: np.ndarray) -> int:
    """Longest run of ``True`` along axis 0 of a ``(T, d)`` mask, over all columns."""
    if mask.size == 0:
        return 0
    padded = np.vstack([np.zeros((1, mask.shape[1]), bool), mask, np.zeros((1, mask.shape[1]), bool)])
    edges = np.diff(padded.astype(np.int8), axis=0)
    starts_t, starts_j = np.nonzero(edges == 1)
    ends_t, ends_j = np.nonzero(edges == -1)
    if starts_t.size == 0:
        return 0
    # nonzero returns row-major order; sort both by column then time to pair them
    s_order = np.lexsort((starts_t, starts_j))
    e_order = np.lexsort((ends_t, ends_j))
    return int((ends_t[e_order] - starts_t[s_order]).max())


def longest_drop_fraction(result: MatchResult) -> float:
    """Longest run of consecutive 2 m misses of any agent, over ``T``."""
    if result.T == 0:
        return 0.0
    return longest_run(~result.presence) / result.T


def nds_t_from_parts(nds_value: float, ldf: float) -> float:
    return (nds_value + (1.0 - ldf)) / 2.0


def report(y: GroundTruthSequence, y_hat: PerceivedSequence) -> MetricReport:
    result = match(y, y_hat)
    m = mean_ap(result)
    ate, aoe = tp_errors(result)
    n = nds_from_parts(m, ate, aoe)
    ldf = longest_drop_fraction(result)
    tp, fn, fp = result.counts(TP_THRESHOLD)
    return MetricReport(
        nds=n,
        nds_t=nds_t_from_parts(n, ldf),
        map=m,
        ate=ate,
        aoe=aoe,
        longest_drop_fraction=ldf,
        counts={"tp": tp, "fn": fn, "fp": fp},
    )


def nds(y: GroundTruthSequence, y_hat: PerceivedSequence) -> float:
    return report(y, y_hat).nds


def nds_t(y: GroundTruthSequence, y_hat: PerceivedSequence) -> float:
    return report(y, y_hat).nds_t


def report_for_errors(y: GroundTruthSequence, e: ErrorSequence) -> MetricReport:
    return report(y, apply_errors(y, e))

