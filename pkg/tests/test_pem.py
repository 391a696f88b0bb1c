import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from advperc import pem
from advperc.errors import ErrorSequence
from advperc.geometry import box_corners
from advperc.scenario import generate_ground_truth
from conftest import make_truth


# -- Student-T ---------------------------------------------------------------


def test_logpdf_against_scipy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        A = rng.normal(size=(2, 2))
        S = A @ A.T + 0.1 * np.eye(2)
        loc = rng.normal(size=2)
        dof = float(rng.uniform(2.1, 50))
        x = rng.normal(size=(50, 2)) * 2
        ours = pem.t_logpdf(x, loc, S, dof)
        ref = stats.multivariate_t(loc=loc, shape=S, df=dof).logpdf(x)
        np.testing.assert_allclose(ours, ref, rtol=1e-9)


def test_logpdf_closed_form_identity_scale():
    # dof = 4, identity scale, x at distance 1 from loc:
    # density = Gamma(3) / (Gamma(2) * 4 pi) * (1 + 1/4) ** -3
    expected = math.log(2.0 / (4.0 * math.pi) * 1.25 ** -3)
    assert pem.t_logpdf(np.array([[1.0, 0.0]]), np.zeros(2), np.eye(2), 4.0)[0] == pytest.approx(expected, rel=1e-9)


def test_student_t_validation():
    with pytest.raises(ValueError):
        pem.StudentT((0.0, 0.0), ((1.0, 0.5), (0.0, 1.0)), 5.0)
    with pytest.raises(ValueError):
        pem.StudentT((0.0, 0.0), ((-1.0, 0.0), (0.0, 1.0)), 5.0)
    with pytest.raises(ValueError):
        pem.StudentT((0.0, 0.0), ((1.0, 0.0), (0.0, 1.0)), 2.0)


def test_sample_moments():
    dist = pem.StudentT.from_arrays((0.3, -0.2), [[0.5, 0.1], [0.1, 0.2]], 6.0)
    x = dist.sample(np.random.default_rng(1), 200_000)
    np.testing.assert_allclose(x.mean(axis=0), dist.loc_array, atol=0.01)
    # covariance of a Student-T is scale * dof / (dof - 2)
    np.testing.assert_allclose(np.cov(x.T), dist.scale_array * 1.5, rtol=0.05, atol=0.005)


def test_ecme_history_non_decreasing():
    dist = pem.StudentT.from_arrays((0.1, 0.0), [[0.2, 0.05], [0.05, 0.1]], 4.0)
    x = dist.sample(np.random.default_rng(2), 2000)
    fitted, history = pem.fit_student_t(x)
    assert len(history) >= 2
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(history, history[1:]))
    assert pem.DOF_BOUNDS[0] <= fitted.dof <= pem.DOF_BOUNDS[1]


def test_fit_recovers_generator():
    data = pem.synth_logs("moderate", seed=0, n_rows=100_000)
    model = pem.fit(data)
    truth = pem.PRESETS["moderate"]
    np.testing.assert_allclose(model.p_det_array(), truth.p_det_array(), atol=0.02)
    for got, want in zip(model.errors, truth.errors):
        np.testing.assert_allclose(got.loc_array, want.loc_array, atol=0.02)
        rel = np.linalg.norm(got.scale_array - want.scale_array) / np.linalg.norm(want.scale_array)
        assert rel < 0.10


def test_fit_degenerate_zero_errors():
    n = 500
    data = pem.PemDataset(np.full(n, 10.0), np.zeros(n), np.ones(n, bool), np.zeros((n, 2)))
    model = pem.fit(data)
    k = int(pem.bin_index(np.array([10.0]), np.array([0.0]))[0])
    assert model.p_det[k] == 1.0
    assert np.all(np.isfinite(model.errors[k].logpdf(np.zeros((1, 2)))))
    assert np.all(np.isfinite(model.errors[k].logpdf(np.ones((1, 2)))))


def test_fit_empty_bins_take_pooled_values():
    rng = np.random.default_rng(3)
    n = 400
    det = rng.random(n) < 0.75
    err = np.where(det[:, None], rng.normal(0, 0.2, (n, 2)), np.nan)
    data = pem.PemDataset(rng.uniform(0, 19, n), np.zeros(n), det, err)
    model = pem.fit(data)
    pooled, _ = pem.fit_student_t(err[det])
    home = int(pem.bin_index(np.array([5.0]), np.array([0.0]))[0])
    for k in range(pem.N_BINS):
        if k == home:
            continue
        assert model.p_det[k] == pytest.approx(det.mean())
        assert model.errors[k] == pooled


def test_fit_empty_dataset():
    with pytest.raises(ValueError):
        pem.fit(pem.PemDataset(np.zeros(0), np.zeros(0), np.zeros(0, bool), np.zeros((0, 2))))


def test_fit_idempotent():
    data = pem.synth_logs("clean", seed=5, n_rows=5000)
    assert pem.fit(data) == pem.fit(data)


def test_bins():
    r = np.array([0.0, 19.99, 20.0, 39.9, 40.0, 100.0])
    o = np.array([0.0, 0.25, 0.5, 0.74, 0.75, 1.0])
    assert pem.bin_index(r, o).tolist() == [0, 1, 4, 4, 8, 8]


# -- occlusion ---------------------------------------------------------------


def _ray_hits(origin, angles, corners):
    """Slab test: does each ray from ``origin`` meet the box?"""
    centre = corners.mean(axis=0)
    ux = corners[1] - corners[0]
    uy = corners[3] - corners[0]
    half = np.array([np.linalg.norm(ux), np.linalg.norm(uy)]) / 2.0
    axes = np.stack([ux / (2 * half[0]), uy / (2 * half[1])])
    o = axes @ (origin - centre)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1) @ axes.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / dirs
        t2 = (half - o) / dirs
    lo = np.where(dirs == 0, np.where(np.abs(o) <= half, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(dirs == 0, np.where(np.abs(o) <= half, np.inf, -np.inf), np.maximum(t1, t2))
    enter, leave = lo.max(axis=1), hi.min(axis=1)
    return (enter <= leave) & (leave >= 0)


def _ray_oracle(ego, positions, headings, extents, n_rays=10_000, n_fan=200_001):
    boxes = [box_corners(p, h, *e) for p, h, e in zip(positions, headings, extents)]
    ranges = [pem._point_box_distance(np.asarray(ego), c) for c in boxes]
    occ = np.zeros(len(boxes))
    for j, cj in enumerate(boxes):
        centre = math.atan2(*(np.asarray(positions[j]) - ego)[::-1])
        fan = centre + np.linspace(-math.pi / 2, math.pi / 2, n_fan)
        seen = fan[_ray_hits(ego, fan, cj)]
        rays = np.linspace(seen.min(), seen.max(), n_rays)
        for k, ck in enumerate(boxes):
            if k != j and ranges[k] < ranges[j]:
                occ[j] = max(occ[j], _ray_hits(ego, rays, ck).mean())
    return occ


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_occlusion_matches_ray_cast(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    ang = rng.uniform(-0.6, 0.6, n)
    rad = rng.uniform(6, 35, n)
    positions = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    headings = rng.uniform(-math.pi, math.pi, n)
    extents = np.stack([rng.uniform(3.5, 5.5, n), rng.uniform(1.6, 2.2, n)], axis=1)
    ego = np.zeros(2)
    got = pem.occlusion_fractions(ego, positions, headings, extents)
    np.testing.assert_allclose(got, _ray_oracle(ego, positions, headings, extents), atol=0.01)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.floats(-math.pi, math.pi))
def test_occlusion_rotation_invariant(seed, theta):
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-30, 30, (4, 2))
    positions = positions[np.hypot(*positions.T) > 4]
    headings = rng.uniform(-math.pi, math.pi, len(positions))
    extents = np.tile([4.5, 1.9], (len(positions), 1))
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    ego = np.array([1.0, -2.0])
    base = pem.occlusion_fractions(ego, positions, headings, extents)
    rotated = pem.occlusion_fractions(ego @ R.T, positions @ R.T, headings + theta, extents)
    np.testing.assert_allclose(base, rotated, atol=1e-9)


def test_lone_agent_unoccluded():
    assert pem.occlusion_fractions((0, 0), [(15.0, 3.0)], [0.3], [(4.5, 1.9)]).tolist() == [0.0]


def test_agent_hidden_behind_larger_one():
    occ = pem.occlusion_fractions((0, 0), [(10.0, 0.0), (30.0, 0.0)], [0.0, 0.0], [(4.5, 6.0), (4.5, 1.9)])
    assert occ[1] == pytest.approx(1.0)
    assert occ[0] == 0.0


def test_occlusion_fraction_by_id():
    y = make_truth([[[10.0, 0.0], [30.0, 0.0]]])
    (frame,) = y.frames
    assert pem.occlusion_fraction(frame, 0) == 0.0
    assert pem.occlusion_fraction(frame, 1) > 0.5
    with pytest.raises(KeyError):
        pem.occlusion_fraction(frame, 7)


# -- sampling ----------------------------------------------------------------


def test_detection_count_binomial(bundled):
    y = generate_ground_truth(bundled["left_turn"])
    dist = pem.StudentT.from_arrays((0, 0), 0.01 * np.eye(2), 5.0)
    model = pem.PemModel.uniform(0.8, dist)
    n = y.T * y.d
    detected = sum(int((~pem.sample_errors(model, y, seed=s).fn).sum()) for s in range(10))
    mean, sd = 0.8 * n * 10, math.sqrt(n * 10 * 0.8 * 0.2)
    assert abs(detected - mean) < 4 * sd


def test_never_detect(bundled):
    y = generate_ground_truth(bundled["lane_follow"])
    model = pem.PemModel.uniform(0.0, pem.StudentT.from_arrays((0, 0), np.eye(2), 5.0))
    assert not pem.sample(model, y, seed=0).present.any()


def test_zero_preset_is_identity(bundled):
    y = generate_ground_truth(bundled["overtake"])
    per = pem.sample(pem.PRESETS["zero"], y, seed=3)
    assert per.present.all()
    np.testing.assert_array_equal(per.positions, y.positions)


def test_sampling_deterministic(bundled):
    y = generate_ground_truth(bundled["right_turn"])
    a = pem.sample_errors(pem.PRESETS["moderate"], y, seed=9)
    b = pem.sample_errors(pem.PRESETS["moderate"], y, seed=9)
    np.testing.assert_array_equal(a.dx, b.dx)
    np.testing.assert_array_equal(a.fn, b.fn)


# -- log-likelihood ----------------------------------------------------------


def _errors(dx, fn):
    dx = np.asarray(dx, dtype=float)
    return ErrorSequence(dx, np.zeros(dx.shape[:2]), np.asarray(fn, bool))


def test_ll_permutation_invariant():
    rng = np.random.default_rng(4)
    pos = rng.uniform(5, 40, (20, 3, 2))
    dx = rng.normal(0, 0.3, (20, 3, 2))
    fn = rng.random((20, 3)) < 0.3
    perm = [2, 0, 1]
    model = pem.PRESETS["moderate"]
    a = pem.log_likelihood(model, make_truth(pos), _errors(dx, fn))
    b = pem.log_likelihood(model, make_truth(pos[:, perm]), _errors(dx[:, perm], fn[:, perm]))
    assert a == pytest.approx(b, rel=1e-12)


def test_ll_increases_with_p_det_when_all_detected():
    y = make_truth(np.full((10, 2, 2), 12.0))
    e = _errors(np.zeros((10, 2, 2)), np.zeros((10, 2)))
    dist = pem.StudentT.from_arrays((0, 0), 0.1 * np.eye(2), 5.0)
    lls = [pem.log_likelihood(pem.PemModel.uniform(p, dist), y, e) for p in (0.2, 0.5, 0.8, 0.99)]
    assert lls == sorted(lls)


def test_ll_maximal_at_loc():
    y = make_truth(np.full((1, 1, 2), 12.0))
    dist = pem.StudentT.from_arrays((0.2, -0.1), [[0.1, 0.02], [0.02, 0.05]], 5.0)
    model = pem.PemModel.uniform(0.9, dist)
    at_loc = pem.log_likelihood(model, y, _errors([[[0.2, -0.1]]], [[False]]))
    rng = np.random.default_rng(5)
    for delta in rng.normal(0, 0.3, (50, 2)):
        assert pem.log_likelihood(model, y, _errors([[[0.2, -0.1] + delta]], [[False]])) < at_loc


def test_ll_missed_detection_term():
    y = make_truth(np.full((5, 2, 2), 12.0))
    model = pem.PemModel.uniform(0.5, pem.StudentT.from_arrays((0, 0), np.eye(2), 5.0))
    ll = pem.log_likelihood(model, y, _errors(np.zeros((5, 2, 2)), np.ones((5, 2))))
    assert ll == pytest.approx(math.log(0.5))


def test_ll_shape_mismatch():
    y = make_truth(np.zeros((5, 1, 2)))
    with pytest.raises(ValueError):
        pem.log_likelihood(pem.PRESETS["moderate"], y, ErrorSequence.zeros(4, 1))


def test_squash_monotone():
    vals = [pem.squash(v) for v in (-1e6, -10.0, -1.0, 0.0, 2.0, 1e6)]
    assert vals == sorted(vals)
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert pem.squash(0.0) == 0.5


# -- persistence -------------------------------------------------------------


def test_model_json_round_trip(tmp_path):
    model = pem.fit(pem.synth_logs("noisy", seed=1, n_rows=5000))
    path = tmp_path / "m.json"
    model.save(path)
    assert pem.PemModel.load(path) == model
    assert pem.get_model(path) == model


def test_model_rejects_foreign_json():
    with pytest.raises(ValueError):
        pem.PemModel.from_dict({"format": "something-else"})


def test_dataset_csv_round_trip(tmp_path):
    data = pem.synth_logs("moderate", seed=2, n_rows=500)
    path = tmp_path / "logs.csv"
    data.to_csv(path)
    back = pem.PemDataset.from_csv(path)
    np.testing.assert_array_equal(back.detected, data.detected)
    np.testing.assert_allclose(back.range, data.range, rtol=1e-12)
    np.testing.assert_allclose(back.error[data.detected], data.error[data.detected], rtol=1e-12)
    assert np.isnan(back.error[~data.detected]).all()


def test_synth_deterministic():
    a = pem.synth_logs("moderate", seed=7, n_rows=1000)
    b = pem.synth_logs("moderate", seed=7, n_rows=1000)
    np.testing.assert_array_equal(a.range, b.range)
    np.testing.assert_array_equal(a.detected, b.detected)
