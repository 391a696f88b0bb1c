import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advperc import metrics
from conftest import make_truth
from advperc.errors import ErrorSequence, PerceivedSequence, apply_errors
from advperc.scenario import SCENARIO_IDS, generate_ground_truth


def scored(y, fn=None, dx=None, dphi=None):
    T, d = y.T, y.d
    e = ErrorSequence(np.zeros((T, d, 2)) if dx is None else dx, np.zeros((T, d)) if dphi is None else dphi,
                      np.zeros((T, d), bool) if fn is None else fn)
    return metrics.report(y, apply_errors(y, e))


@pytest.mark.parametrize("name", SCENARIO_IDS)
def test_identity_scores_one(bundled, name):
    gt = generate_ground_truth(bundled[name])
    rep = metrics.report(gt, apply_errors(gt, ErrorSequence.zeros(gt.T, gt.d)))
    assert rep.nds == 1.0 and rep.nds_t == 1.0 and rep.map == 1.0
    assert rep.ate == 0.0 and rep.aoe == 0.0 and rep.longest_drop_fraction == 0.0


def test_identity_all_thresholds():
    y = make_truth(np.random.default_rng(0).uniform(0, 50, (10, 3, 2)))
    res = metrics.match(y, apply_errors(y, ErrorSequence.zeros(10, 3)))
    for th in metrics.THRESHOLDS:
        assert res.counts(th) == (30, 0, 0)


def test_displacement_threshold_semantics():
    y = make_truth([[[0.0, 0.0]]])
    dx = np.array([[[1.5, 0.0]]])
    res = metrics.match(y, apply_errors(y, ErrorSequence(dx, np.zeros((1, 1)), np.zeros((1, 1), bool))))
    assert res.counts(0.5) == (0, 1, 1)
    assert res.counts(1.0) == (0, 1, 1)
    assert res.counts(2.0) == (1, 0, 0)
    assert res.counts(4.0) == (1, 0, 0)
    assert res.false_negatives(0, 0.5) == [0]


def _lexicographic_oracle(dist, limit):
    """Exhaustive search: the matching whose ascending distance list is
    lexicographically smallest (missing entries count as +inf)."""
    n, m = dist.shape
    k = min(n, m)
    best, best_key = [], (math.inf,) * k
    feasible = [(i, j) for i in range(n) for j in range(m) if dist[i, j] <= limit]
    for r in range(k + 1):
        for combo in itertools.combinations(feasible, r):
            if len({i for i, _ in combo}) < r or len({j for _, j in combo}) < r:
                continue
            key = tuple(sorted(dist[i, j] for i, j in combo)) + (math.inf,) * (k - r)
            if key < best_key:
                best, best_key = sorted(combo), key
    return best


def test_greedy_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(300):
        d = int(rng.integers(1, 5))
        y = make_truth(rng.uniform(0, 4, (1, d, 2)))
        dx = rng.normal(0, 1.5, (1, d, 2))
        fn = rng.random((1, d)) < 0.2
        per = apply_errors(y, ErrorSequence(dx, np.zeros((1, d)), fn))
        res = metrics.match(y, per)
        dist = np.linalg.norm(y.positions[0][:, None] - per.positions[0][None], axis=2)
        dist = np.where(per.present[0][None, :], dist, np.inf)
        for th in metrics.THRESHOLDS:
            assert res.tp_pairs(0, th) == [p for p in _lexicographic_oracle(dist, 4.0) if dist[p] <= th]


def test_nds_formula_example():
    assert metrics.nds_from_parts(0.8, 0.2, 0.1) == pytest.approx(0.87)
    assert metrics.nds_from_parts(1.0, 5.0, 3.0) == pytest.approx(0.8)  # errors clipped at 1


def test_all_dropped():
    y = make_truth(np.zeros((10, 2, 2)) + [[0.0, 0.0], [20.0, 0.0]])
    rep = scored(y, fn=np.ones((10, 2), bool))
    assert rep.map == 0.0 and rep.ate == 1.0 and rep.aoe == 1.0
    assert rep.nds == pytest.approx(0.3)
    assert rep.longest_drop_fraction == 1.0
    assert rep.nds_t == pytest.approx(0.15)


def test_longest_drop_fraction_example():
    y = make_truth(np.zeros((20, 1, 2)))
    fn = np.zeros((20, 1), bool)
    fn[[3, 4, 5, 9], 0] = True
    assert scored(y, fn=fn).longest_drop_fraction == pytest.approx(0.15)


def test_far_detection_counts_as_drop_for_ldf():
    y = make_truth(np.zeros((10, 1, 2)))
    dx = np.zeros((10, 1, 2))
    dx[2:6, 0] = (3.0, 0.0)
    rep = scored(y, dx=dx)
    assert rep.longest_drop_fraction == pytest.approx(0.4)
    assert rep.counts == {"tp": 6, "fn": 4, "fp": 4}


def test_nds_t_formula():
    assert metrics.nds_t_from_parts(0.9, 0.5) == pytest.approx(0.7)


def test_ap_without_false_positives_is_recall():
    y = make_truth(np.zeros((10, 1, 2)))
    fn = np.zeros((10, 1), bool)
    fn[:3] = True
    res = metrics.match(y, apply_errors(y, ErrorSequence(np.zeros((10, 1, 2)), np.zeros((10, 1)), fn)))
    assert metrics.average_precision(res, 0.5) == pytest.approx(0.7)


def test_tp_errors_averaged_at_two_metres():
    y = make_truth(np.zeros((4, 1, 2)))
    dx = np.array([[[0.3, 0.4]], [[0.0, 0.0]], [[3.0, 0.0]], [[0.0, 1.0]]])
    dphi = np.array([[0.2], [-0.2], [1.0], [0.0]])
    rep = scored(y, dx=dx, dphi=dphi)
    assert rep.ate == pytest.approx(0.5)
    assert rep.aoe == pytest.approx(0.4 / 3)


def test_length_mismatch():
    y = make_truth(np.zeros((5, 1, 2)))
    per = apply_errors(make_truth(np.zeros((6, 1, 2))), ErrorSequence.zeros(6, 1))
    with pytest.raises(ValueError, match="lengths"):
        metrics.match(y, per)


def test_report_json_fields():
    y = make_truth(np.zeros((5, 1, 2)))
    doc = json.loads(scored(y).to_json())
    assert set(doc) == {"nds", "nds_t", "map", "ate", "aoe", "longest_drop_fraction", "counts"}


def _random_case(draw_seed, T=30, d=3):
    rng = np.random.default_rng(draw_seed)
    y = make_truth(rng.uniform(0, 30, (T, d, 2)), rng.uniform(-3, 3, (T, d)))
    return y, rng


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 3))
def test_scores_in_unit_interval(seed, p_fn, noise):
    y, rng = _random_case(seed)
    rep = scored(y, fn=rng.random((y.T, y.d)) < p_fn, dx=rng.normal(0, noise, (y.T, y.d, 2)),
                 dphi=rng.normal(0, noise, (y.T, y.d)))
    for v in (rep.nds, rep.nds_t, rep.map, rep.longest_drop_fraction):
        assert 0.0 <= v <= 1.0
    assert rep.nds_t == (rep.nds + (1.0 - rep.longest_drop_fraction)) / 2.0
    assert rep.nds_t >= rep.nds / 2.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 0.6))
def test_ldf_monotone_in_false_negatives(seed, p_fn):
    y, rng = _random_case(seed)
    fn = rng.random((y.T, y.d)) < p_fn
    more = fn.copy()
    more[rng.integers(y.T), rng.integers(y.d)] = True
    assert scored(y, fn=more).longest_drop_fraction >= scored(y, fn=fn).longest_drop_fraction


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 15), st.integers(0, 10_000))
def test_contiguous_drops_score_no_better(k, seed):
    rng = np.random.default_rng(seed)
    T = 40
    y = make_truth(np.tile([[0.0, 0.0]], (T, 1, 1)))
    contiguous = np.zeros((T, 1), bool)
    start = int(rng.integers(0, T - k + 1))
    contiguous[start:start + k] = True
    scattered = np.zeros((T, 1), bool)
    scattered[rng.choice(T, size=k, replace=False)] = True
    assert scored(y, fn=contiguous).nds_t <= scored(y, fn=scattered).nds_t


def test_longest_run_helper():
    mask = np.array([[0, 1], [1, 1], [1, 0], [1, 1]], bool)
    assert metrics.longest_run(mask) == 3
    assert metrics.longest_run(np.zeros((5, 2), bool)) == 0


def test_matching_ignores_identity_labels():
    # detections swapped between two nearby agents still match by distance
    y = make_truth([[[0.0, 0.0], [1.0, 0.0]]])
    per = PerceivedSequence(y.timestamps, y.agent_ids, np.array([[[1.0, 0.0], [0.0, 0.0]]]), np.zeros((1, 2)),
                            np.ones((1, 2), bool), y.extents, np.zeros((1, 2, 2)))
    assert metrics.report(y, per).nds == 1.0
