import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionparse.errors import DimensionError, DomainError, EmptyDomainError
from motionparse.metrics import confusion_matrix, eval_depth, eval_scene_flow, eval_segmentation, median_scale


# ---- median scaling ----

def test_median_scale_factors(rng):
    gt = rng.uniform(1, 50, (6, 7))
    assert median_scale(2 * gt, gt)[1] == 0.5
    assert median_scale(gt, gt)[1] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 60))
def test_median_scale_equalises_medians(seed, n):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 80, n)
    pred = rng.uniform(0.1, 20, n)
    valid = rng.random(n) > 0.3
    valid[0] = True
    scaled, factor = median_scale(pred, gt, valid)
    assert np.median(scaled[valid]) == np.median(gt[valid])
    # any correction stays within a few ulps of a uniform scaling
    np.testing.assert_allclose(scaled, pred * factor, rtol=1e-14, atol=0)


def test_median_scale_errors():
    with pytest.raises(EmptyDomainError):
        median_scale(np.ones(3), np.ones(3), np.zeros(3))
    with pytest.raises(DomainError):
        median_scale(-np.ones(3), np.ones(3))
    with pytest.raises(DimensionError):
        median_scale(np.ones(3), np.ones(4))


# ---- depth ----

def test_perfect_depth(rng):
    gt = rng.uniform(1, 70, (5, 5))
    r = eval_depth(gt, gt)
    assert (r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.delta1, r.delta2, r.delta3) == (0, 0, 0, 0, 1, 1, 1)


def test_hand_computed_depth_fixture():
    r = eval_depth(np.array([1.0, 5.0]), np.array([2.0, 4.0]))
    assert r.abs_rel == 0.375 and r.sq_rel == 0.375 and r.rmse == 1.0
    assert r.rmse_log == pytest.approx(math.sqrt((math.log(2) ** 2 + math.log(1.25) ** 2) / 2), rel=1e-15)
    # ratio 1.25 is not strictly below the threshold and 2 exceeds 1.25**3
    assert (r.delta1, r.delta2, r.delta3) == (0.0, 0.5, 0.5)


def test_depth_cap_clamps_both_maps():
    r = eval_depth(np.array([200.0]), np.array([90.0]))
    assert r.abs_rel == 0.0
    r = eval_depth(np.array([100.0]), np.array([40.0]), cap=80.0)
    assert r.abs_rel == 1.0


def depth_oracle(pred, gt):
    n = len(gt)
    ratios = [max(p / g, g / p) for p, g in zip(pred, gt)]
    return (
        sum(abs(g - p) / g for p, g in zip(pred, gt)) / n,
        sum((g - p) ** 2 / g for p, g in zip(pred, gt)) / n,
        math.sqrt(sum((g - p) ** 2 for p, g in zip(pred, gt)) / n),
        math.sqrt(sum((math.log(g) - math.log(p)) ** 2 for p, g in zip(pred, gt)) / n),
        *(sum(r < 1.25**k for r in ratios) / n for k in (1, 2, 3)),
    )


def test_depth_matches_straight_line_oracle(rng):
    gt = rng.uniform(1, 30, 300)  # stays below the cap
    pred = gt * rng.uniform(0.5, 2.0, 300)
    r = eval_depth(pred, gt)
    got = (r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.delta1, r.delta2, r.delta3)
    assert np.allclose(got, depth_oracle(pred, gt), rtol=1e-12, atol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 1.2))
def test_depth_ratio_metrics_are_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1, 40, 50)  # c * pred stays below the cap
    pred = gt * rng.uniform(0.6, 1.6, 50)
    a, b = eval_depth(pred, gt), eval_depth(c * pred, c * gt)
    assert b.abs_rel == pytest.approx(a.abs_rel, rel=1e-12)
    assert b.rmse_log == pytest.approx(a.rmse_log, rel=1e-9, abs=1e-12)
    assert b.sq_rel == pytest.approx(c * a.sq_rel, rel=1e-12)
    assert b.rmse == pytest.approx(c * a.rmse, rel=1e-12)
    # delta thresholds may flip on exact ties only
    assert abs(b.delta1 - a.delta1) <= 1 / 50 and a.delta1 <= a.delta2 <= a.delta3


def test_depth_validity_and_errors(rng):
    gt = rng.uniform(1, 50, (4, 4))
    valid = np.zeros((4, 4), bool)
    valid[0, 0] = True
    pred = gt.copy()
    pred[1:, :] = 1000.0
    assert eval_depth(pred, gt, valid).abs_rel == 0.0
    with pytest.raises(EmptyDomainError):
        eval_depth(pred, gt, np.zeros((4, 4)))
    with pytest.raises(DomainError):
        eval_depth(pred, -gt)
    with pytest.raises(DimensionError):
        eval_depth(pred, gt[:3])


# ---- scene flow ----

def sf_inputs(rng, shape=(6, 8)):
    g = [rng.uniform(1, 30, shape) for _ in range(2)]
    p = [x + rng.normal(0, 2, shape) for x in g]
    fg_ = rng.normal(0, 5, shape + (2,))
    fp = fg_ + rng.normal(0, 3, shape + (2,))
    fg = rng.random(shape) > 0.6
    return p[0], g[0], p[1], g[1], fp, fg_, fg


def test_perfect_scene_flow(rng):
    _, g1, _, g2, _, f, fg = sf_inputs(rng)
    r = eval_scene_flow(g1, g1, g2, g2, f, f, fg)
    for pop in (r.d1, r.d2, r.fl):
        assert (pop.bg, pop.fg, pop.bg_fg) == (0.0, 0.0, 0.0)


def test_single_foreground_pixel():
    one = np.zeros((1, 1, 2))
    r = eval_scene_flow(np.array([[3.0]]), np.array([[5.0]]), np.ones((1, 1)), np.ones((1, 1)), one, one, np.ones((1, 1)))
    assert r.d1.fg == 2.0 and r.d1.bg is None and r.d1.bg_fg == 2.0


def test_scene_flow_matches_population_oracle(rng):
    d1p, d1g, d2p, d2g, fp, fgt, fg = sf_inputs(rng)
    valid = rng.random(fg.shape) > 0.2
    r = eval_scene_flow(d1p, d1g, d2p, d2g, fp, fgt, fg, valid)
    for name, got, err in (
        ("d1", r.d1, np.abs(d1g - d1p)), ("d2", r.d2, np.abs(d2g - d2p)),
        ("fl", r.fl, np.sqrt(((fgt - fp) ** 2).sum(axis=-1))),
    ):
        bg = [err[i, j] for i, j in np.ndindex(fg.shape) if valid[i, j] and not fg[i, j]]
        fgl = [err[i, j] for i, j in np.ndindex(fg.shape) if valid[i, j] and fg[i, j]]
        assert got.bg == pytest.approx(sum(bg) / len(bg), abs=1e-12)
        assert got.fg == pytest.approx(sum(fgl) / len(fgl), abs=1e-12)
        combined = (len(bg) * got.bg + len(fgl) * got.fg) / (len(bg) + len(fgl))
        assert got.bg_fg == pytest.approx(combined, abs=1e-12)
        assert min(got.bg, got.fg) <= got.bg_fg <= max(got.bg, got.fg)


def test_scene_flow_outlier_mode():
    gt = np.array([[10.0, 100.0, 10.0]])
    pred = np.array([[14.0, 104.0, 12.0]])
    f = np.zeros((1, 3, 2))
    r = eval_scene_flow(pred, gt, gt, gt, f, f, np.zeros((1, 3)), mode="outlier")
    # 4 > 3 and > 5% of 10; 4 < 5% of 100; 2 < 3
    assert r.d1.bg == pytest.approx(1 / 3) and r.d2.bg == 0.0 and r.mode == "outlier"
    with pytest.raises(DomainError):
        eval_scene_flow(pred, gt, gt, gt, f, f, np.zeros((1, 3)), mode="median")


def test_scene_flow_shape_checks():
    z = np.zeros((2, 2))
    with pytest.raises(DimensionError):
        eval_scene_flow(z, z, z, z, np.zeros((2, 2, 3)), np.zeros((2, 2, 2)), z)


# ---- segmentation ----

def test_perfect_segmentation(rng):
    gt = (rng.random((5, 5)) > 0.5).astype(int)
    r = eval_segmentation(gt, gt)
    assert (r.pixel_acc, r.mean_acc, r.mean_iou, r.fw_iou) == (1, 1, 1, 1)


def test_complement_segmentation():
    gt = np.zeros((4, 4), int)
    gt[:, :2] = 1
    r = eval_segmentation(1 - gt, gt)
    assert r.pixel_acc == 0 and r.mean_iou == 0


def test_hand_counted_confusion_fixture():
    gt = np.zeros((4, 4), int)
    gt[:, :2] = 1
    pred = np.zeros((4, 4), int)
    pred[:, :3] = 1
    n = confusion_matrix(pred, gt)
    assert n.tolist() == [[4, 4], [0, 8]]
    r = eval_segmentation(pred, gt)
    assert r.pixel_acc == 12 / 16
    assert r.mean_acc == (1 + 0.5) / 2
    assert r.mean_iou == pytest.approx((2 / 3 + 1 / 2) / 2, abs=1e-15)
    assert r.fw_iou == pytest.approx((8 * 2 / 3 + 8 * 1 / 2) / 16, abs=1e-15)


def test_single_class_ground_truth():
    gt = np.zeros((3, 3), int)
    r = eval_segmentation(gt, gt)
    assert r.mean_acc == 1.0 and r.mean_iou == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_segmentation_metrics_are_permutation_invariant_fractions(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 2, 30)
    pred = rng.integers(0, 2, 30)
    perm = rng.permutation(30)
    a, b = eval_segmentation(pred, gt), eval_segmentation(pred[perm], gt[perm])
    assert a == b
    assert all(0.0 <= v <= 1.0 for v in a.as_dict().values())


def test_segmentation_input_checks():
    with pytest.raises(DomainError):
        eval_segmentation(np.full((2, 2), 2), np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        eval_segmentation(np.zeros((2, 2)), np.zeros((2, 3)))
