"""Binned perception error model.

Detection existence is Bernoulli and the position error of a detection is a
bivariate Student-T, each conditioned on a 3 x 3 grid of (range, occlusion)
bins.  The model scores error sequences by log-likelihood, samples
detections for the tuning gate and is fitted by maximum likelihood from
detector-like logs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import gammaln

from .errors import ErrorSequence, PerceivedSequence, apply_errors
from .geometry import box_corners
from .scenario import GroundTruthSequence

PEM_FORMAT = "advperc-pem"
PEM_FORMAT_VERSION = 1
RANGE_EDGES = (20.0, 40.0)
OCCLUSION_EDGES = (0.25, 0.75)
N_BINS = 9
MIN_BIN_ROWS = 30
SCALE_FLOOR = 1e-6  # m^2, smallest eigenvalue of a fitted scale matrix
DOF_BOUNDS = (2.01, 200.0)
LOG_FLOOR = 1e-12


def bin_index(rng, occlusion):
    """Flat bin index ``3 * range_bin + occlusion_bin`` (vectorised)."""
    r = np.searchsorted(RANGE_EDGES, np.asarray(rng, dtype=float), side="right")
    o = np.searchsorted(OCCLUSION_EDGES, np.asarray(occlusion, dtype=float), side="right")
    return 3 * r + o


def bin_label(k: int) -> str:
    r_lab = ("0-20", "20-40", "40+")[k // 3]
    o_lab = ("0-0.25", "0.25-0.75", "0.75-1")[k % 3]
    return f"range {r_lab} m, occlusion {o_lab}"


# -- Student-T ---------------------------------------------------------------


@dataclass(frozen=True)
class StudentT:
    """Bivariate Student-T with location ``loc``, scale matrix ``scale`` and ``dof``.

    A zero scale matrix is accepted as a noise-free point mass for sampling;
    densities are then evaluated with the scale floor.
    """

    loc: tuple[float, float]
    scale: tuple[tuple[float, float], tuple[float, float]]
    dof: float

    def __post_init__(self):
        S = np.asarray(self.scale, dtype=float)
        if S.shape != (2, 2) or not np.allclose(S, S.T):
            raise ValueError("scale must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(S).min() < 0:
            raise ValueError("scale must be positive semi-definite")
        if not self.dof > 2:
            raise ValueError("dof must exceed 2")

    @classmethod
    def from_arrays(cls, loc, scale, dof) -> "StudentT":
        loc = np.asarray(loc, dtype=float)
        S = np.asarray(scale, dtype=float)
        S = 0.5 * (S + S.T)
        return cls((float(loc[0]), float(loc[1])),
                   ((float(S[0, 0]), float(S[0, 1])), (float(S[1, 0]), float(S[1, 1]))), float(dof))

    @property
    def loc_array(self) -> np.ndarray:
        return np.asarray(self.loc, dtype=float)

    @property
    def scale_array(self) -> np.ndarray:
        return np.asarray(self.scale, dtype=float)

    def _density_scale(self) -> np.ndarray:
        return floor_scale(self.scale_array)

    def logpdf(self, x) -> np.ndarray:
        return t_logpdf(np.asarray(x, dtype=float), self.loc_array, self._density_scale(), self.dof)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        # x = loc + z / sqrt(g / dof), z ~ N(0, scale), g ~ chi2(dof)
        z = rng.standard_normal((n, 2))
        g = rng.chisquare(self.dof, size=n)
        L = _psd_sqrt(self.scale_array)
        return self.loc_array + (z @ L.T) / np.sqrt(g / self.dof)[:, None]


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    return V * np.sqrt(np.clip(w, 0.0, None))


def floor_scale(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * np.maximum(w, SCALE_FLOOR)) @ V.T


def t_logpdf(x: np.ndarray, loc: np.ndarray, scale: np.ndarray, dof: float) -> np.ndarray:
    x = np.atleast_2d(x)
    p = x.shape[1]
    diff = x - loc
    sol = np.linalg.solve(scale, diff.T).T
    maha = np.einsum("ij,ij->i", diff, sol)
    _, logdet = np.linalg.slogdet(scale)
    return (gammaln(0.5 * (dof + p)) - gammaln(0.5 * dof) - 0.5 * p * math.log(dof * math.pi)
            - 0.5 * logdet - 0.5 * (dof + p) * np.log1p(maha / dof))


def fit_student_t(x, dof0: float = 5.0, max_iter: int = 200, tol: float = 1e-9):
    """Maximum-likelihood fit by ECME.

    Location and scale come from the usual EM weights ``(dof + p) / (dof + maha)``;
    the degrees of freedom are then maximised on the observed-data
    likelihood.  Returns ``(StudentT, log-likelihood history)``; the history
    is non-decreasing up to the scale floor.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != 2 or len(x) == 0:
        raise ValueError("need a non-empty (n, 2) array")
    n, p = x.shape
    loc = np.median(x, axis=0)
    scale = floor_scale(np.cov(x.T, bias=True) if n > 1 else np.zeros((2, 2)))
    dof = dof0

    def total(loc_, scale_, dof_):
        return float(t_logpdf(x, loc_, scale_, dof_).sum())

    history = [total(loc, scale, dof)]
    for _ in range(max_iter):
        diff = x - loc
        maha = np.einsum("ij,ij->i", diff, np.linalg.solve(scale, diff.T).T)
        w = (dof + p) / (dof + maha)
        loc = (w[:, None] * x).sum(axis=0) / w.sum()
        diff = x - loc
        scale = floor_scale((w[:, None, None] * diff[:, :, None] * diff[:, None, :]).sum(axis=0) / n)
        res = minimize_scalar(lambda v: -total(loc, scale, v), bounds=DOF_BOUNDS, method="bounded",
                              options={"xatol": 1e-6})
        if -res.fun >= total(loc, scale, dof):
            dof = float(res.x)
        history.append(total(loc, scale, dof))
        if abs(history[-1] - history[-2]) <= tol * max(1.0, abs(history[-2])):
            break
    return StudentT.from_arrays(loc, scale, dof), history


# -- model -------------------------------------------------------------------


@dataclass(frozen=True)
class PemModel:
    p_det: tuple[float, ...]  # one per bin
    errors: tuple[StudentT, ...]

    def __post_init__(self):
        if len(self.p_det) != N_BINS or len(self.errors) != N_BINS:
            raise ValueError(f"a PEM has exactly {N_BINS} bins")
        if not all(0.0 <= p <= 1.0 for p in self.p_det):
            raise ValueError("p_det must lie in [0, 1]")

    @classmethod
    def uniform(cls, p_det: float, dist: StudentT) -> "PemModel":
        return cls((float(p_det),) * N_BINS, (dist,) * N_BINS)

    def p_det_array(self) -> np.ndarray:
        return np.asarray(self.p_det, dtype=float)

    def to_dict(self) -> dict:
        return {
            "format": PEM_FORMAT,
            "version": PEM_FORMAT_VERSION,
            "range_edges": list(RANGE_EDGES),
            "occlusion_edges": list(OCCLUSION_EDGES),
            "bins": [
                {"bin": k, "label": bin_label(k), "p_det": self.p_det[k],
                 "loc": list(self.errors[k].loc), "scale": [list(r) for r in self.errors[k].scale],
                 "dof": self.errors[k].dof}
                for k in range(N_BINS)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PemModel":
        if doc.get("format") != PEM_FORMAT:
            raise ValueError("not a PEM file")
        if doc.get("version") != PEM_FORMAT_VERSION:
            raise ValueError(f"unsupported PEM version {doc.get('version')}")
        bins = sorted(doc["bins"], key=lambda b: b["bin"])
        return cls(tuple(float(b["p_det"]) for b in bins),
                   tuple(StudentT.from_arrays(b["loc"], b["scale"], b["dof"]) for b in bins))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PemModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _preset(p_det_grid, loc_x, scale_std, dof) -> PemModel:
    """``p_det_grid[r][o]``; ``loc_x[r]`` longitudinal bias; ``scale_std[r]`` = (sx, sy)."""
    p, dists = [], []
    for r in range(3):
        for o in range(3):
            p.append(float(p_det_grid[r][o]))
            sx, sy = scale_std[r]
            dists.append(StudentT.from_arrays((loc_x[r], 0.0), np.diag([sx * sx, sy * sy]), dof))
    return PemModel(tuple(p), tuple(dists))


# Generator presets for the synthetic logs.  Detection probability drops with
# occlusion and range; errors widen with range.
PRESETS = {
    "zero": PemModel.uniform(1.0, StudentT.from_arrays((0.0, 0.0), np.zeros((2, 2)), 200.0)),
    "clean": _preset(
        [[0.99, 0.97, 0.90], [0.98, 0.95, 0.85], [0.96, 0.92, 0.80]],
        (0.0, 0.02, 0.05), ((0.10, 0.08), (0.15, 0.10), (0.25, 0.15)), 8.0),
    "moderate": _preset(
        [[0.97, 0.90, 0.65], [0.95, 0.86, 0.60], [0.90, 0.80, 0.50]],
        (0.0, 0.05, 0.10), ((0.20, 0.15), (0.30, 0.20), (0.45, 0.30)), 5.0),
    "noisy": _preset(
        [[0.92, 0.80, 0.50], [0.88, 0.72, 0.45], [0.80, 0.65, 0.40]],
        (0.05, 0.10, 0.20), ((0.35, 0.25), (0.50, 0.35), (0.70, 0.50)), 3.5),
}
DEFAULT_PRESET = "moderate"


def get_model(name_or_path) -> PemModel:
    if isinstance(name_or_path, PemModel):
        return name_or_path
    if str(name_or_path) in PRESETS:
        return PRESETS[str(name_or_path)]
    return PemModel.load(name_or_path)


# -- dataset -----------------------------------------------------------------

CSV_COLUMNS = ("range", "occlusion", "detected", "dx", "dy")


@dataclass
class PemDataset:
    """Rows of ``(range, occlusion, detected, dx, dy)``; errors are NaN when not detected."""

    range: np.ndarray
    occlusion: np.ndarray
    detected: np.ndarray
    error: np.ndarray  # (n, 2)

    def __post_init__(self):
        self.range = np.asarray(self.range, dtype=float)
        self.occlusion = np.asarray(self.occlusion, dtype=float)
        self.detected = np.asarray(self.detected, dtype=bool)
        self.error = np.asarray(self.error, dtype=float).reshape(-1, 2)
        n = len(self.range)
        if not (len(self.occlusion) == len(self.detected) == len(self.error) == n):
            raise ValueError("dataset columns differ in length")
        finite = np.isfinite(self.error).all(axis=1)
        if not np.array_equal(finite, self.detected):
            raise ValueError("a position error must be present exactly when the row is detected")

    def __len__(self) -> int:
        return len(self.range)

    @property
    def bins(self) -> np.ndarray:
        return bin_index(self.range, self.occlusion)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r, o, det, (ex, ey) in zip(self.range, self.occlusion, self.detected, self.error):
                if det:
                    w.writerow([repr(float(r)), repr(float(o)), 1, repr(float(ex)), repr(float(ey))])
                else:
                    w.writerow([repr(float(r)), repr(float(o)), 0, "", ""])

    @classmethod
    def from_csv(cls, path) -> "PemDataset":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError(f"expected columns {','.join(CSV_COLUMNS)}")
            rows = list(reader)
        det = np.array([r["detected"] == "1" for r in rows], dtype=bool)
        err = np.array([[float(r["dx"]), float(r["dy"])] if d else [np.nan, np.nan]
                        for r, d in zip(rows, det)]).reshape(-1, 2)
        return cls(np.array([float(r["range"]) for r in rows]),
                   np.array([float(r["occlusion"]) for r in rows]), det, err)


def fit(data: PemDataset) -> PemModel:
    """Per-bin maximum likelihood with fallback to the pooled fit.

    A bin with fewer than ``MIN_BIN_ROWS`` detected rows takes the pooled
    Student-T; its detection probability falls back to the pooled rate when
    it has fewer than ``MIN_BIN_ROWS`` rows in total.
    """
    if len(data) == 0:
        raise ValueError("cannot fit a PEM to an empty dataset")
    det = data.detected
    p_global = float(det.mean())
    if det.any():
        dist_global, _ = fit_student_t(data.error[det])
    else:
        dist_global = StudentT.from_arrays((0.0, 0.0), SCALE_FLOOR * np.eye(2), DOF_BOUNDS[1])
    bins = data.bins
    p_det, dists = [], []
    for k in range(N_BINS):
        in_bin = bins == k
        n_rows = int(in_bin.sum())
        p_det.append(float(det[in_bin].mean()) if n_rows >= MIN_BIN_ROWS else p_global)
        hits = in_bin & det
        if int(hits.sum()) >= MIN_BIN_ROWS:
            dists.append(fit_student_t(data.error[hits])[0])
        else:
            dists.append(dist_global)
    return PemModel(tuple(p_det), tuple(dists))


# -- occlusion ---------------------------------------------------------------


def _point_box_distance(p: np.ndarray, corners: np.ndarray) -> float:
    centre = corners.mean(axis=0)
    ux = corners[1] - corners[0]
    uy = corners[3] - corners[0]
    half = np.array([np.linalg.norm(ux), np.linalg.norm(uy)]) / 2.0
    local = np.array([np.dot(p - centre, ux), np.dot(p - centre, uy)]) / (2.0 * half)
    outside = np.maximum(np.abs(local) - half, 0.0)
    return float(np.hypot(*outside))


def agent_arcs(ego_position, positions, headings, extents):
    """Angular interval ``(lo, hi)`` and minimum range of every agent box seen from the ego.

    Angles are relative to the direction of the box centre, so intervals
    never straddle the branch cut.  A box containing the ego covers the
    whole circle at range 0.
    """
    ego = np.asarray(ego_position, dtype=float)
    out = []
    for pos, hdg, ext in zip(positions, headings, extents):
        corners = box_corners(pos, hdg, ext[0], ext[1])
        rmin = _point_box_distance(ego, corners)
        rel = corners - ego
        centre_dir = math.atan2(pos[1] - ego[1], pos[0] - ego[0])
        if rmin <= 0.0:
            out.append((centre_dir - math.pi, centre_dir + math.pi, 0.0, centre_dir))
            continue
        ang = np.arctan2(rel[:, 1], rel[:, 0]) - centre_dir
        ang = (ang + math.pi) % (2 * math.pi) - math.pi
        out.append((centre_dir + float(ang.min()), centre_dir + float(ang.max()), rmin, centre_dir))
    return out


def _overlap(a_lo, a_hi, b_lo, b_hi) -> float:
    # b is shifted by whole turns to the copy nearest to a
    mid_a, mid_b = 0.5 * (a_lo + a_hi), 0.5 * (b_lo + b_hi)
    shift = 2 * math.pi * round((mid_a - mid_b) / (2 * math.pi))
    b_lo, b_hi = b_lo + shift, b_hi + shift
    best = max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))
    for extra in (-2 * math.pi, 2 * math.pi):
        best = max(best, min(a_hi, b_hi + extra) - max(a_lo, b_lo + extra))
    return best


def occlusion_fractions(ego_position, positions, headings, extents) -> np.ndarray:
    """Occlusion of every agent: the largest fraction of its arc covered by a
    single strictly closer agent's arc."""
    arcs = agent_arcs(ego_position, positions, headings, extents)
    occ = np.zeros(len(arcs))
    for j, (lo, hi, rj, _) in enumerate(arcs):
        width = hi - lo
        if width <= 0.0:
            continue
        for k, (klo, khi, rk, _) in enumerate(arcs):
            if k != j and rk < rj:
                occ[j] = max(occ[j], min(1.0, _overlap(lo, hi, klo, khi) / width))
    return occ


def occlusion_fraction(frame, agent_id: int) -> float:
    """``frame`` is ``(ego_state, agent_states)`` as in ``GroundTruthSequence.frames``
    (with or without a leading timestamp)."""
    ego, agents = frame[-2], frame[-1]
    ids = [a.agent_id for a in agents]
    if agent_id not in ids:
        raise KeyError(f"agent {agent_id} not in frame")
    occ = occlusion_fractions(ego.position, [a.position for a in agents], [a.heading for a in agents],
                              [a.extent for a in agents])
    return float(occ[ids.index(agent_id)])


def frame_features(ego_position, positions, headings, extents) -> tuple[np.ndarray, np.ndarray]:
    """Centre range and occlusion of every agent in one frame."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    rng = np.hypot(*(positions - np.asarray(ego_position, dtype=float)).T) if len(positions) else np.zeros(0)
    occ = occlusion_fractions(ego_position, positions, headings, extents)
    return rng, occ


def sequence_features(y: GroundTruthSequence) -> tuple[np.ndarray, np.ndarray]:
    """``(range, occlusion)`` arrays of shape ``(T, d)`` relative to ``y``'s ego."""
    T, d = y.T, y.d
    rng, occ = np.zeros((T, d)), np.zeros((T, d))
    for t in range(T):
        rng[t], occ[t] = frame_features(y.ego[t].position, y.positions[t], y.headings[t], y.extents)
    return rng, occ


# -- scoring and sampling ----------------------------------------------------


def log_likelihood_terms(model: PemModel, bins: np.ndarray, e: ErrorSequence) -> np.ndarray:
    """Per agent-frame log-likelihood, shape ``(T, d)``."""
    p = model.p_det_array()[bins]
    out = np.where(e.fn, np.log(np.maximum(1.0 - p, LOG_FLOOR)), np.log(np.maximum(p, LOG_FLOOR)))
    detected = ~e.fn
    for k in np.unique(bins[detected]):
        sel = detected & (bins == k)
        out[sel] += model.errors[k].logpdf(e.dx[sel])
    return out


def log_likelihood(model: PemModel, y: GroundTruthSequence, e: ErrorSequence, features=None) -> float:
    """Mean per agent-frame log-likelihood of ``e`` under ``model``.

    Bins come from ground-truth range and occlusion relative to ``y``'s ego;
    heading errors are not scored.  ``features`` may carry precomputed
    ``sequence_features(y)``.
    """
    if e.shape != (y.T, y.d):
        raise ValueError(f"error sequence has shape {e.shape}, expected ({y.T}, {y.d})")
    if y.d == 0:
        return 0.0
    rng, occ = sequence_features(y) if features is None else features
    return float(log_likelihood_terms(model, bin_index(rng, occ), e).mean())


def squash(ll: float) -> float:
    """Monotone map of a mean log-likelihood to (0, 1) for search bookkeeping."""
    return float(0.5 * (1.0 + math.tanh(0.5 * ll)))  # the logistic function, overflow-free


def _draw(model: PemModel, bins: np.ndarray, rng: np.random.Generator):
    """One Bernoulli draw per entry, then one Student-T draw per entry."""
    flat = bins.reshape(-1)
    detected = rng.random(flat.shape) < model.p_det_array()[flat]
    dx = np.zeros((flat.size, 2))
    for k in np.unique(flat):
        sel = flat == k
        dx[sel] = model.errors[k].sample(rng, int(sel.sum()))
    dx[~detected] = 0.0
    return detected.reshape(bins.shape), dx.reshape(bins.shape + (2,))


def sample_errors(model: PemModel, y: GroundTruthSequence, seed) -> ErrorSequence:
    """Open-loop sample: bins from ``y``'s ego trajectory, heading error zero."""
    rng = np.random.default_rng(seed)
    r, o = sequence_features(y)
    detected, dx = _draw(model, bin_index(r, o), rng)
    return ErrorSequence(dx, np.zeros((y.T, y.d)), ~detected)


def sample(model: PemModel, y: GroundTruthSequence, seed) -> PerceivedSequence:
    return apply_errors(y, sample_errors(model, y, seed))


def closed_loop_perceiver(model: PemModel, y: GroundTruthSequence, seed):
    """Per-frame sampler for ``simulation.rollout(perceive=...)``.

    Bins are computed from the ego state actually reached at each frame.
    """
    rng = np.random.default_rng(seed)

    def perceive(t: int, ego_state):
        r, o = frame_features(ego_state.position, y.positions[t], y.headings[t], y.extents)
        detected, dx = _draw(model, bin_index(r, o), rng)
        return detected, y.positions[t] + dx, y.headings[t].copy()

    return perceive


# -- synthetic logs ----------------------------------------------------------


def synth_logs(config="moderate", seed: int = 0, n_rows: int = 100_000, max_range: float = 60.0) -> PemDataset:
    """Detector-like logs drawn from a generating PEM.

    Range is uniform on ``[0, max_range)``; occlusion is 0 for half of the
    rows and uniform on ``[0, 1]`` otherwise.
    """
    model = get_model(config)
    rng = np.random.default_rng(seed)
    rng_col = rng.uniform(0.0, max_range, n_rows)
    occ = np.where(rng.random(n_rows) < 0.5, 0.0, rng.uniform(0.0, 1.0, n_rows))
    detected, dx = _draw(model, bin_index(rng_col, occ), rng)
    err = np.where(detected[:, None], dx, np.nan)
    return PemDataset(rng_col, occ, detected, err)
