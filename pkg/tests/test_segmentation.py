import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import flows, moving_box_bundle, rigid_bundle
from motionparse.errors import DegeneracyError, DimensionError, DomainError
from motionparse.hmp import parse
from motionparse.metrics import eval_segmentation
from motionparse.segmentation import (
    Gmm2, GridGraphEnergy, SegmentParams, build_energy, contrast_weights, fit_gmm2, graph_cut_segment,
    residual_flow, segment_moving_objects, segment_residual,
)


def iou(a, b):
    a, b = a > 0, b > 0
    return (a & b).sum() / (a | b).sum()


def random_energy(rng, h, w):
    return GridGraphEnergy(rng.normal(size=(h, w, 2)), rng.uniform(0, 1.5, (h, w - 1)), rng.uniform(0, 1.5, (h - 1, w)))


# ---- residual flow ----

def test_residual_of_equal_fields_is_zero(rng):
    M = rng.normal(size=(4, 5, 3))
    assert not residual_flow(M, M).any()
    with pytest.raises(DimensionError):
        residual_flow(M, M[:, :4])


def test_residual_on_static_oracle():
    b = rigid_bundle(0)
    F_fwd, F_bwd = flows(b)
    out = parse(b.depth_t, b.depth_s, F_fwd, F_bwd, b.pose_ts, np.zeros(b.depth_t.shape), b.intrinsics, visibility=b.visibility)
    assert residual_flow(out.flow_background, out.rigid).max() < 1e-6


def test_residual_on_moving_box_is_its_speed():
    b = moving_box_bundle(0, box_motion=(0.1, 0.0, 0.0))
    F_fwd, F_bwd = flows(b)
    out = parse(b.depth_t, b.depth_s, F_fwd, F_bwd, b.pose_ts, np.zeros(b.depth_t.shape), b.intrinsics, visibility=b.visibility)
    r = residual_flow(out.flow_background, out.rigid)
    vis = b.visibility > 0
    # the residual is the box translation seen from the source camera, so its norm is the box speed
    assert np.allclose(r[vis & (b.segment > 0)], 0.1, atol=1e-6)
    assert np.max(r[vis & (b.segment == 0)]) < 1e-6


# ---- GMM ----

def test_gmm_recovers_separated_components():
    rng = np.random.default_rng(7)
    x = np.concatenate([rng.normal(0.01, 0.001, 1000), rng.normal(0.5, 0.01, 1000)])
    g = fit_gmm2(x, seed=3)
    assert abs(g.means[0] - 0.01) < 0.001 and abs(g.means[1] - 0.5) < 0.05
    assert np.allclose(g.weights, 0.5, atol=0.01)


def test_gmm_two_point_masses():
    g = fit_gmm2([0.2] * 50 + [0.7] * 50)
    assert g.means == pytest.approx((0.2, 0.7), abs=1e-12)
    assert g.weights == pytest.approx((0.5, 0.5), abs=1e-12)
    assert g.variances == pytest.approx((1e-12, 1e-12))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(5, 300))
def test_em_log_likelihood_is_monotone(seed, n):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.gamma(2.0, 0.1, n), rng.normal(1.0, 0.3, n // 3 + 1)])
    g = fit_gmm2(x, seed=seed)
    trace = np.asarray(g.log_likelihood)
    assert np.all(np.diff(trace) >= -1e-9 * np.maximum(1, np.abs(trace[:-1])))
    assert g.means[0] <= g.means[1] and math.isclose(sum(g.weights), 1.0)


def test_gmm_degenerate_samples():
    with pytest.raises(DegeneracyError):
        fit_gmm2([0.3] * 10)
    with pytest.raises(DegeneracyError):
        fit_gmm2([0.3])


def test_gmm_is_deterministic_under_seed(rng):
    x = rng.random(500)
    assert fit_gmm2(x, seed=5) == fit_gmm2(x, seed=5)


def test_gmm_invariants_are_enforced():
    with pytest.raises(DomainError):
        Gmm2((0.0, 1.0), (0.0, 1.0), (0.5, 0.5))
    with pytest.raises(DomainError):
        Gmm2((1.0, 0.0), (1.0, 1.0), (0.5, 0.5))
    with pytest.raises(DomainError):
        Gmm2((0.0, 1.0), (1.0, 1.0), (0.7, 0.7))


def test_unary_is_negative_log_of_weighted_density():
    g = Gmm2((0.0, 1.0), (0.25, 4.0), (0.3, 0.7))
    x = 0.4
    for k in range(2):
        mu, var, w = g.means[k], g.variances[k], g.weights[k]
        density = w * math.exp(-(x - mu) ** 2 / (2 * var)) / math.sqrt(2 * math.pi * var)
        assert g.nll(x)[k] == pytest.approx(-math.log(density), rel=1e-14)


# ---- graph cut ----

@pytest.mark.parametrize("seed", range(4))
def test_graph_cut_matches_exhaustive_search_on_tiny_grids(seed):
    rng = np.random.default_rng(seed)
    E = random_energy(rng, 3, 4)
    best = min(E.energy(np.array(bits).reshape(3, 4)) for bits in itertools.product((0, 1), repeat=12))
    assert abs(E.energy(E.minimize()) - best) < 1e-9


@pytest.mark.parametrize("shape", [(8, 8), (12, 16), (16, 16)])
def test_graph_cut_beats_uniform_and_random_labelings(shape):
    rng = np.random.default_rng(sum(shape))
    E = random_energy(rng, *shape)
    found = E.energy(E.minimize())
    assert found <= E.energy(np.zeros(shape)) + 1e-9
    assert found <= E.energy(np.ones(shape)) + 1e-9
    random_labels = rng.integers(0, 2, (10_000,) + shape)
    data = np.where(random_labels == 1, E.unary[..., 1], E.unary[..., 0]).sum(axis=(1, 2))
    smooth = (E.right * (random_labels[:, :, 1:] != random_labels[:, :, :-1])).sum(axis=(1, 2))
    smooth = smooth + (E.down * (random_labels[:, 1:] != random_labels[:, :-1])).sum(axis=(1, 2))
    assert found <= np.min(data + smooth) + 1e-9


def test_zero_gamma_is_per_pixel_maximum_likelihood(rng):
    g = Gmm2((0.1, 0.6), (0.01, 0.02), (0.6, 0.4))
    r = rng.uniform(0, 0.8, (10, 12))
    ml = (g.nll(r)[..., 1] < g.nll(r)[..., 0]).astype(np.uint8)
    assert np.array_equal(graph_cut_segment(r, g, gamma=0.0), ml)


def test_two_clean_regions_are_labelled_exactly(rng):
    r = np.full((10, 10), 0.02)
    r[3:7, 2:8] = 0.5
    noisy = r + rng.normal(0, 0.005, r.shape)
    g = fit_gmm2(noisy.ravel())
    for gamma in (0.5, 2.0, 5.0):
        assert np.array_equal(graph_cut_segment(noisy, g, gamma), (r > 0.1).astype(np.uint8))


def test_pairwise_term_removes_isolated_noise():
    r = np.zeros((9, 9)) + 0.05
    r[4, 4] = 0.6
    r[0:3, :] = 0.8
    g = Gmm2((0.05, 0.8), (0.01, 0.01), (0.5, 0.5))
    assert graph_cut_segment(r, g, 0.0)[4, 4] == 1
    assert graph_cut_segment(r, g, 50.0, scale=1.0)[4, 4] == 0


def test_energy_validation():
    with pytest.raises(DomainError):
        GridGraphEnergy(np.zeros((2, 2, 2)), -np.ones((2, 1)), np.zeros((1, 2)))
    with pytest.raises(DimensionError):
        GridGraphEnergy(np.zeros((2, 2, 2)), np.ones((2, 2)), np.zeros((1, 2)))
    with pytest.raises(DomainError):
        contrast_weights(np.zeros((2, 2)), -1.0)


def test_contrast_weights():
    r = np.array([[0.0, 1.0, 1.0]])
    right, down = contrast_weights(r, 2.0)
    # scale = 2 * mean(delta^2) = 2 * (1 + 0) / 2 = 1
    assert np.allclose(right, [[2 * math.exp(-1.0), 2.0]]) and down.shape == (0, 3)
    right, _ = contrast_weights(np.zeros((2, 3)), 1.5)
    assert np.all(right == 1.5)


@pytest.mark.parametrize("factor", [0.1, 3.0, 40.0])
def test_segmentation_is_invariant_to_residual_scale(factor):
    rng = np.random.default_rng(11)
    r = np.abs(rng.normal(0.02, 0.01, (14, 14)))
    r[4:10, 3:9] = rng.normal(0.4, 0.03, (6, 6))
    base = segment_residual(r)
    assert base.sum() > 0
    assert np.array_equal(segment_residual(factor * r), base)


def test_degenerate_or_slow_residuals_give_empty_mask():
    assert not segment_residual(np.full((5, 5), 0.3)).any()
    tiny = np.random.default_rng(0).uniform(0, 1e-5, (6, 6))
    assert not segment_residual(tiny, min_motion=1e-3).any()


# ---- pipeline ----

def pipeline_mask(b, **kw):
    F_fwd, F_bwd = flows(b)
    return segment_moving_objects(b.depth_t, b.depth_s, F_fwd, F_bwd, b.pose_ts, b.intrinsics, SegmentParams(**kw))


@pytest.mark.parametrize("seed", range(5))
def test_pipeline_finds_the_moving_box(seed):
    b = moving_box_bundle(seed)
    mask = pipeline_mask(b)
    assert iou(mask, b.segment) > 0.9
    assert eval_segmentation(mask, b.segment.astype(np.uint8)).mean_iou > 0.9


@pytest.mark.parametrize("seed", range(3))
def test_pipeline_on_static_scene_is_empty(seed):
    assert not pipeline_mask(rigid_bundle(seed)).any()


def test_pipeline_is_deterministic():
    b = moving_box_bundle(3)
    assert np.array_equal(pipeline_mask(b, seed=9), pipeline_mask(b, seed=9))


def test_build_energy_masks_data_terms(rng):
    g = Gmm2((0.0, 1.0), (0.1, 0.1), (0.5, 0.5))
    r = rng.random((4, 4))
    mask = np.ones((4, 4))
    mask[0, 0] = 0
    E = build_energy(r, g, 1.0, unary_mask=mask)
    assert not E.unary[0, 0].any() and E.unary[1, 1].any()
    with pytest.raises(DimensionError):
        build_energy(r, g, 1.0, guide=np.ones((3, 3)))
