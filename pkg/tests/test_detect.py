import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oapsense.detect import (
    CalibrationModel,
    DetectorConfig,
    Heatmap,
    SpotSet,
    apply_calibration,
    build_target_heatmap,
    estimate_count,
    fit_calibration,
    fit_spots,
    matched_filter_heatmap,
    nms_peaks,
    pursue_missing,
    refine_subpixel,
    select_calibration,
)
from oapsense.errors import ConfigError, FitError
from oapsense.sensor import Frame, SensorConfig, spot_profile

GRID = SensorConfig.centered(64)
PITCH = GRID.pitch_dx


def _frame(points, sigma, grid=GRID, energies=None):
    energies = np.ones(len(points)) if energies is None else energies
    px = sum(e * spot_profile(p, sigma, grid) for p, e in zip(points, energies))
    return Frame(np.asarray(px, dtype=float) + np.zeros((grid.ny, grid.nx)), grid)


def _center(m, n, grid=GRID):
    return grid.x_centers[m], grid.y_centers[n]


def test_target_heatmap_single_peak():
    cfg = DetectorConfig.for_sigma(2 * PITCH)
    hm = build_target_heatmap([_center(20, 30)], cfg, GRID)
    assert hm.values.max() == 1.0
    assert np.unravel_index(hm.values.argmax(), hm.values.shape) == (30, 20)


def test_target_heatmap_permutation_invariant():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.01, 0.01, (7, 2))
    cfg = DetectorConfig.for_sigma(0.001)
    a = build_target_heatmap(pts, cfg, GRID).values
    b = build_target_heatmap(pts[rng.permutation(7)], cfg, GRID).values
    assert np.array_equal(a, b)


def test_target_heatmap_overlap_clipped():
    s = 2 * PITCH
    cfg = DetectorConfig.for_sigma(s)
    mx, my = _center(30, 30)
    hm = build_target_heatmap([(mx - s, my), (mx + s, my)], cfg, GRID)
    # 2 * exp(-0.5) > 1, so the clip engages
    assert 2 * math.exp(-0.5) > 1
    assert hm.values[30, 30] == 1.0


def test_matched_filter_peak_at_spot():
    truth = (0.0031, -0.0047)
    f = _frame([truth], 0.0015)
    hm = matched_filter_heatmap(f, DetectorConfig.for_sigma(0.0015))
    r, c = np.unravel_index(hm.values.argmax(), hm.values.shape)
    assert (c, r) == GRID.pixel_of(truth)
    assert hm.values.max() == 1.0 and hm.values.min() >= 0.0


def test_matched_filter_shift_equivariance():
    s = 0.0012
    a = _frame([_center(25, 30)], s)
    b = _frame([_center(26, 30)], s)
    cfg = DetectorConfig.for_sigma(s)
    ha = matched_filter_heatmap(a, cfg).values
    hb = matched_filter_heatmap(b, cfg).values
    np.testing.assert_allclose(hb[:, 1:], ha[:, :-1], atol=1e-9)


def test_two_spots_at_six_sigma():
    s = 0.0012
    p1 = _center(20, 32)
    p2 = (p1[0] + 6 * s, p1[1])
    f = _frame([p1, p2], s)
    cfg = DetectorConfig.for_sigma(s)
    spots = nms_peaks(matched_filter_heatmap(f, cfg), cfg)
    assert len(spots) == 2
    got = spots.centroids[np.argsort(spots.centroids[:, 0])]
    for g, t in zip(got, [p1, p2]):
        assert np.hypot(*(g - t)) <= PITCH / 2 + 1e-12


def _peaks_heatmap(points, sigma=2 * PITCH):
    return build_target_heatmap(points, DetectorConfig.for_sigma(sigma), GRID)


def test_nms_radius_rule():
    far = [_center(10, 10), _center(30, 10)]
    cfg = DetectorConfig(sigma_tgt=PITCH, nms_radius=5 * PITCH)
    assert len(nms_peaks(_peaks_heatmap(far, PITCH), cfg)) == 2
    hm = _peaks_heatmap(far, PITCH)
    hm.values[10, 13] = 0.9  # weaker maximum inside the radius of (10, 10)
    spots = nms_peaks(hm, cfg)
    assert len(spots) == 2
    assert not any(np.allclose(c, _center(13, 10)) for c in spots.centroids)


def test_nms_known_count_recovers_seven():
    idx = [(8, 8), (8, 30), (8, 55), (30, 20), (30, 45), (55, 10), (55, 50)]
    pts = [_center(m, n) for m, n in idx]
    hm = _peaks_heatmap(pts)
    cfg = DetectorConfig.for_sigma(2 * PITCH, known_count=7)
    spots = nms_peaks(hm, cfg)
    assert len(spots) == 7 and not spots.shortfall
    for p in pts:
        assert np.min(np.hypot(*(spots.centroids - p).T)) <= PITCH


def test_nms_known_count_pads_and_flags_shortfall():
    hm = _peaks_heatmap([_center(20, 20)])
    spots = nms_peaks(hm, DetectorConfig.for_sigma(2 * PITCH, known_count=3))
    assert spots.shortfall
    assert len(spots) == 1


def test_estimate_count():
    idx = [(8, 8), (8, 40), (32, 24), (56, 8), (56, 56)]
    cfg = DetectorConfig.for_sigma(2 * PITCH, peak_threshold=0.3)
    assert estimate_count(_peaks_heatmap([_center(m, n) for m, n in idx]), cfg) == 5
    assert estimate_count(Heatmap(np.zeros((64, 64)), GRID), cfg) == 0
    merged = _peaks_heatmap([_center(30, 30), _center(31, 30)])
    assert estimate_count(merged, cfg) == 1


def test_refine_on_pixel_center_is_exact():
    truth = _center(30, 22)
    f = _frame([truth], 1.5 * PITCH)
    out = refine_subpixel(f, SpotSet([truth], [1.0]), 4.5 * PITCH)
    assert np.hypot(*(out.centroids[0] - truth)) < 1e-6


def test_refine_on_pixel_corner():
    truth = (GRID.x_edges[30], GRID.y_edges[22])
    f = _frame([truth], 1.5 * PITCH)
    cfg = DetectorConfig.for_sigma(1.5 * PITCH)
    raw = nms_peaks(matched_filter_heatmap(f, cfg), cfg)
    assert np.hypot(*(raw.centroids[0] - truth)) >= 0.5 * PITCH
    out = refine_subpixel(f, raw, cfg.refine_window)
    assert np.hypot(*(out.centroids[0] - truth)) < 0.1 * PITCH


def test_refine_uniform_frame_keeps_center():
    f = Frame(np.ones((64, 64)), GRID)
    c = _center(10, 40)
    out = refine_subpixel(f, SpotSet([c], [1.0]), 3 * PITCH)
    np.testing.assert_allclose(out.centroids[0], c)


def test_refine_window_must_cover_a_pixel():
    f = Frame(np.zeros((64, 64)), GRID)
    with pytest.raises(ConfigError):
        refine_subpixel(f, SpotSet([(0, 0)], [1.0]), 0.5 * PITCH)


def test_pursuit_finds_hidden_neighbour():
    s = 1.5 * PITCH
    bright, dim = _center(30, 30), (GRID.x_centers[30] + 1.6 * s, GRID.y_centers[30])
    f = _frame([bright, dim], s, energies=[1.0, 0.4])
    cfg = DetectorConfig.for_sigma(s)
    found = nms_peaks(matched_filter_heatmap(f, cfg), cfg)
    assert len(found) == 1
    grown = pursue_missing(f, found, 2, s, cfg)
    assert len(grown) == 2 and grown.flags[1] == "pursued"
    fitted = fit_spots(f, grown, s)
    for t in (bright, dim):
        assert np.min(np.hypot(*(fitted.centroids - t).T)) < 0.05 * PITCH


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.008, 0.008), st.floats(-0.008, 0.008), st.floats(0.4, 1.0))
def test_fit_spots_recovers_pair(x, y, amp):
    s = 2 * PITCH
    truth = np.array([[x, y], [x + 4 * s, y - 2 * s]])
    f = _frame(truth, s, energies=[1.0, amp])
    init = SpotSet(truth + PITCH * np.array([[0.6, -0.4], [-0.5, 0.7]]), [1, 1])
    out = fit_spots(f, init, s)
    np.testing.assert_allclose(out.centroids, truth, atol=1e-3 * PITCH)


def test_calibration_identity_from_unbiased_pairs():
    rng = np.random.default_rng(1)
    p = rng.uniform(-0.014, 0.014, (300, 2))
    m = fit_calibration(p, p)
    assert m.residual_rms < 1e-10
    np.testing.assert_allclose(m.coef_x, CalibrationModel.identity().coef_x, atol=1e-8)
    np.testing.assert_allclose(m.coef_y, CalibrationModel.identity().coef_y, atol=1e-8)


def test_calibration_recovers_offset_and_gain():
    rng = np.random.default_rng(2)
    true = rng.uniform(-0.014, 0.014, (300, 2))
    off = np.array([0.001, -0.002])
    m = fit_calibration(true + off, true)
    recovered = -m.predict(np.zeros((1, 2)))[0]
    np.testing.assert_allclose(recovered, off, rtol=0.01)
    corrected = apply_calibration(m, SpotSet(true[:10] + off, np.ones(10)))
    np.testing.assert_allclose(corrected.centroids, true[:10], atol=1e-9)
    g = fit_calibration(1.05 * true, true)
    assert 1 / g.coef_x[1] == pytest.approx(1.05, rel=0.01)
    assert 1 / g.coef_y[2] == pytest.approx(1.05, rel=0.01)


def test_calibration_identity_leaves_spots():
    s = SpotSet([[0.001, 0.002], [-0.003, 0.0]], [1, 1])
    np.testing.assert_array_equal(apply_calibration(CalibrationModel.identity(), s).centroids, s.centroids)


def test_select_calibration_keeps_identity_for_pure_noise():
    rng = np.random.default_rng(5)
    true = rng.uniform(-0.014, 0.014, (120, 2))
    raw = true + rng.normal(0, 1e-4, true.shape)
    m = select_calibration(raw, true)
    np.testing.assert_array_equal(m.coef_x, CalibrationModel.identity().coef_x)
    assert m.residual_rms == pytest.approx(math.sqrt(np.mean(np.sum((raw - true) ** 2, axis=1))))


def test_select_calibration_keeps_cubic_for_real_distortion():
    rng = np.random.default_rng(6)
    true = rng.uniform(-0.014, 0.014, (300, 2))
    raw = 1.05 * true + 0.001 + rng.normal(0, 1e-5, true.shape)
    m = select_calibration(raw, true)
    np.testing.assert_allclose(m.predict(raw), true, atol=1e-4)


def test_calibration_needs_data():
    p = np.zeros((50, 2))
    with pytest.raises(FitError):
        fit_calibration(p, p)
    with pytest.raises(FitError):
        fit_calibration(np.zeros((200, 2)), np.zeros((200, 2)))


def test_calibration_save_load(tmp_path):
    rng = np.random.default_rng(3)
    t = rng.uniform(-0.014, 0.014, (200, 2))
    m = fit_calibration(t + 0.0003 * t ** 2 / 0.014, t)
    m.save(tmp_path / "cal.csv")
    back = CalibrationModel.load(tmp_path / "cal.csv")
    assert np.array_equal(back.predict(t), m.predict(t))
    assert (tmp_path / "cal.csv").read_text().splitlines()[0] == "term,coef_x,coef_y"


def test_detector_config_validation():
    with pytest.raises(ConfigError):
        DetectorConfig(peak_threshold=1.0)
    with pytest.raises(ConfigError):
        DetectorConfig(sigma_tgt=0)
    assert DetectorConfig.for_sigma(0.002).refine_window == pytest.approx(0.006)
