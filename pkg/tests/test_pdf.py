from __future__ import annotations

import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevkit import pdf
from bevkit.harness.instances import canonical_scene, perfect_prediction
from bevkit.harness.props import random_scene, sampler_violations
from bevkit.rng import SplitMix64
from bevkit.synth import Plane, SceneObject, SceneSpec, make_depth_scene
from bevkit.tensor import softmax

BINS = pdf.DepthBinSpec()


def p_for_depth(d, bins=BINS):
    """Two-bin distribution whose expected depth is exactly ``d`` (up to rounding)."""
    d = np.asarray(d, float)
    c = bins.centers
    k = np.clip(np.searchsorted(c, d) - 1, 0, bins.D - 2)
    t = (d - c[k]) / bins.width
    P = np.zeros(d.shape + (bins.D,))
    np.put_along_axis(P, k[..., None], (1 - t)[..., None], axis=-1)
    np.put_along_axis(P, (k + 1)[..., None], t[..., None], axis=-1)
    return np.moveaxis(P, -1, 1)


def scene(planes, objects=(), w=12, h=12, **kw):
    return make_depth_scene(SceneSpec(w, h, list(planes), list(objects), **kw), BINS)


# configuration ---------------------------------------------------------------------------

def test_bin_spec_centres():
    c = BINS.centers
    assert BINS.width == pytest.approx(69 / 70, rel=1e-15)
    np.testing.assert_allclose(c, 1 + (np.arange(70) + 0.5) * 69 / 70, rtol=1e-15)
    assert np.all(np.diff(c) > 0)


@pytest.mark.parametrize("kw", [dict(d_min=0.0), dict(d_min=5, d_max=5), dict(D=1)])
def test_bin_spec_rejects(kw):
    with pytest.raises(ValueError):
        pdf.DepthBinSpec(**kw)


@pytest.mark.parametrize("kw", [dict(tau_abs=0), dict(tau_rel=1.0), dict(w_edge=0, w_global=0),
                                dict(dilation_radius=0)])
def test_ranking_config_rejects(kw):
    with pytest.raises(ValueError):
        pdf.RankingConfig(**kw)


def test_configs_from_json_field_names():
    r = pdf.RankingConfig.from_dict(json.loads('{"tau_abs": 1.0, "n_edge_pairs": 8}'))
    assert r.tau_abs == 1.0 and r.n_edge_pairs == 8 and r.tau_rel == 0.03
    with pytest.raises(ValueError, match="unknown"):
        pdf.RankingConfig.from_dict({"tau": 1})
    w = pdf.DepthLossWeights.from_dict({"lambda1": 0.2})
    assert w == pdf.DepthLossWeights(0.2, 0.01, 0.03, 0.05)
    with pytest.raises(ValueError):
        pdf.DepthLossWeights(lambda3=-1)


def test_published_weight_setting_c():
    assert pdf.DepthLossWeights() == pdf.DepthLossWeights.setting("C") == pdf.DepthLossWeights(0.1, 0.01, 0.03, 0.05)
    b = pdf.DepthLossWeights.setting("B")
    assert (b.lambda_abs, b.lambda_dense, b.lambda3) == (0.01, 0.03, 0.0)


# gaussian targets and KL ---------------------------------------------------------------------

def test_gaussian_target_concentrates_at_centre():
    g = pdf.gaussian_target(BINS.centers[10], BINS, BINS.width / 10)
    assert g[10] > 0.999


def test_gaussian_target_symmetric_between_centres():
    bins = pdf.DepthBinSpec(1.0, 9.0, 8)
    g = pdf.gaussian_target(5.0, bins)
    assert g[3] == g[4]
    g = pdf.gaussian_target((BINS.centers[18] + BINS.centers[19]) / 2, BINS)
    assert g[18] == pytest.approx(g[19], rel=1e-12)


def test_gaussian_targets_normalised_and_floored():
    rng = np.random.default_rng(0)
    d = rng.uniform(1, 70, 1000)
    sig = rng.uniform(0.05, 5.0)
    g = pdf.gaussian_targets(d, BINS, sig)
    assert np.abs(g.sum(axis=-1) - 1).max() < 1e-12
    assert g.min() > 0


@pytest.mark.parametrize("d", [0.5, 70.5])
def test_gaussian_target_rejects_out_of_range(d):
    with pytest.raises(ValueError):
        pdf.gaussian_target(d, BINS)


def _kl_batch(P, d, mask):
    z = np.zeros_like(d)
    return pdf.DepthSupervisionBatch(P, d, mask, d, z, np.zeros(d.shape[:1] + (0,) + d.shape[1:]))


def test_kl_zero_at_target():
    d = np.random.default_rng(1).uniform(2, 60, (1, 4, 5))
    P = pdf.gaussian_targets(d, BINS).transpose(0, 3, 1, 2)
    assert abs(pdf.kl_prob_loss(_kl_batch(P, d, np.ones_like(d)), BINS)) <= 1e-9


def test_kl_two_bins_tiny_sigma_is_ln2():
    bins = pdf.DepthBinSpec(1.0, 3.0, 2)
    d = np.full((1, 1, 1), 1.5)
    P = np.full((1, 2, 1, 1), 0.5)
    assert pdf.kl_prob_loss(_kl_batch(P, d, np.ones_like(d)), bins, sigma=1e-3) == pytest.approx(math.log(2), abs=1e-9)


def test_kl_ignores_unmasked_pixels():
    rng = np.random.default_rng(2)
    d = rng.uniform(2, 60, (1, 3, 3))
    mask = np.zeros_like(d)
    mask[0, 1, 1] = 1
    P = softmax(rng.normal(size=(1, 70, 3, 3)), axis=1)
    before = pdf.kl_prob_loss(_kl_batch(P, d, mask), BINS)
    P2 = P.copy()
    P2[0, :, 0, 0] = np.roll(P2[0, :, 0, 0], 5)
    assert pdf.kl_prob_loss(_kl_batch(P2, d, mask), BINS) == before


def test_kl_empty_mask_warns_and_is_zero():
    d = np.full((1, 2, 2), 5.0)
    with pytest.warns(pdf.EmptySupervisionWarning):
        assert pdf.kl_prob_loss(_kl_batch(np.full((1, 70, 2, 2), 1 / 70), d, np.zeros_like(d)), BINS) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 5.0))
def test_kl_nonnegative(seed, sigma):
    rng = np.random.default_rng(seed)
    d = rng.uniform(1, 70, (1, 3, 4))
    P = softmax(rng.normal(scale=3, size=(1, 70, 3, 4)), axis=1)
    assert pdf.kl_prob_loss(_kl_batch(P, d, np.ones_like(d)), BINS, sigma) >= -1e-9


# expected depth and SmoothL1 ---------------------------------------------------------------

def test_expected_depth_anchors():
    onehot = np.zeros((1, 70, 1, 1))
    onehot[0, 12] = 1
    assert pdf.expected_depth(onehot, BINS)[0, 0, 0] == BINS.centers[12]
    uni = np.full((1, 70, 2, 2), 1 / 70)
    np.testing.assert_allclose(pdf.expected_depth(uni, BINS), 35.5, rtol=1e-14)  # (1 + 70) / 2


def test_expected_depth_loop_oracle():
    P = softmax(np.random.default_rng(3).normal(size=(2, 70, 3, 2)), axis=1)
    ref = np.zeros((2, 3, 2))
    for b in range(2):
        for y in range(3):
            for x in range(2):
                ref[b, y, x] = sum(P[b, k, y, x] * BINS.centers[k] for k in range(70))
    np.testing.assert_allclose(pdf.expected_depth(P, BINS), ref, atol=1e-12, rtol=0)


def test_smooth_l1_values_and_joint():
    assert pdf.smooth_l1(0.0) == 0.0
    assert pdf.smooth_l1(0.5) == 0.125
    assert pdf.smooth_l1(2.0) == 1.5
    eps = 1e-9
    assert abs(pdf.smooth_l1(1 - eps) - pdf.smooth_l1(1 + eps)) < 1e-8
    assert abs(pdf.smooth_l1_grad(1 - eps) - pdf.smooth_l1_grad(1 + eps)) < 1e-8
    with pytest.raises(ValueError):
        pdf.smooth_l1(1.0, beta=0)


def test_foundation_loss_perfect_and_linear():
    b = scene([Plane(10.0)], [SceneObject((2, 2, 6, 6), 4.0)], sparse_fraction=0.3)
    perfect = b.with_prediction(p_for_depth(b.d_dense))
    l_found, l_abs, l_dense = pdf.foundation_loss(perfect, BINS)
    assert max(l_found, l_abs, l_dense) < 1e-20
    off = b.with_prediction(p_for_depth(np.clip(b.d_dense + 1.7, 1, 69)))
    f1, la, ld = pdf.foundation_loss(off, BINS, lambda_abs=0.01, lambda_dense=0.03)
    f2, _, _ = pdf.foundation_loss(off, BINS, lambda_abs=0.01, lambda_dense=0.06)
    assert f2 - 0.01 * la == pytest.approx(2 * (f1 - 0.01 * la), rel=1e-12)


def test_foundation_loss_both_masks_empty_warns():
    b = scene([Plane(10.0)], sparse_fraction=0.0)
    empty = pdf.DepthSupervisionBatch(b.P, b.d_sparse, b.mask_sparse, b.d_dense,
                                      np.zeros_like(b.mask_dense), b.instance_masks)
    with pytest.warns(pdf.EmptySupervisionWarning):
        assert pdf.foundation_loss(empty, BINS) == (0.0, 0.0, 0.0)


# threshold and pair loss -----------------------------------------------------------------

def test_dynamic_threshold_examples():
    cfg = pdf.RankingConfig()
    assert pdf.dynamic_threshold(20, 30, cfg) == (pytest.approx(0.75), True)
    assert pdf.dynamic_threshold(7, 7, cfg)[1] is False
    tau, inc = pdf.dynamic_threshold(2.0, 2.4, cfg)
    assert tau == 0.5 and inc is False


def test_pair_rank_loss_values():
    assert pdf.pair_rank_loss(20.0, 10.0, 30.0, 5.0) == pytest.approx(math.log1p(math.exp(-10)), rel=1e-12)
    assert abs(pdf.pair_rank_loss(3.0, 3.0, 9.0, 1.0) - math.log(2)) <= 1e-12
    assert abs(pdf.pair_rank_loss(3.0, 3.0, 1.0, 9.0) - math.log(2)) <= 1e-12
    assert pdf.pair_rank_loss(10.0, 20.0, 30.0, 5.0) == pytest.approx(10 + math.log1p(math.exp(-10)), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(*(st.floats(1, 70) for _ in range(4)))
def test_pair_rank_loss_symmetric(a, b, gi, gj):
    assert pdf.pair_rank_loss(a, b, gi, gj) == pdf.pair_rank_loss(b, a, gj, gi)


@settings(max_examples=60, deadline=None)
@given(st.floats(-30, 30), st.floats(1e-3, 5), st.floats(1, 70), st.floats(1, 70))
def test_pair_rank_loss_monotone(m, step, gi, gj):
    if gi == gj:
        return
    s = math.copysign(1, gi - gj)
    assert pdf.pair_rank_loss(s * (m + step), 0.0, gi, gj) < pdf.pair_rank_loss(s * m, 0.0, gi, gj)


# ring and sampling --------------------------------------------------------------------------

def test_ring_examples():
    m = np.zeros((11, 11), bool)
    m[5, 5] = True
    ring = pdf.dilated_ring(m, 1)
    assert ring.sum() == 8 and ring[4:7, 4:7].sum() == 8
    assert not pdf.dilated_ring(np.ones((4, 4)), 2).any()
    sq = np.zeros((9, 9), bool)
    sq[3:6, 3:6] = True
    assert pdf.dilated_ring(sq, 1).sum() == 16


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3))
def test_ring_disjoint_and_within_chebyshev(seed, r):
    m = np.random.default_rng(seed).uniform(size=(9, 10)) < 0.1
    ring = pdf.dilated_ring(m, r)
    assert not (ring & m).any()
    ys, xs = np.nonzero(m)
    for y, x in zip(*np.nonzero(ring)):
        assert (np.maximum(abs(ys - y), abs(xs - x)) <= r).any()


def test_edge_pairs_object_in_front_accepts_everything():
    b = scene([Plane(30.0)], [SceneObject((3, 3, 8, 8), 5.0)])
    cfg = pdf.RankingConfig(n_edge_pairs=64, n_global_pairs=0)
    pairs = pdf.sample_pairs(b, cfg)
    assert pairs.edge.shape == (64, 2)
    d = b.d_dense.ravel()
    np.testing.assert_array_equal(np.abs(d[pairs.edge[:, 0]] - d[pairs.edge[:, 1]]), 25.0)
    # brute force: every ring/interior pair clears the tolerance
    ring = np.flatnonzero(pdf.dilated_ring(b.instance_masks[0, 0], 2))
    inner = np.flatnonzero(b.instance_masks[0, 0])
    _, inc = pdf.dynamic_threshold(d[ring][:, None], d[inner][None, :], cfg)
    assert inc.all()


def test_no_instances_give_no_edge_pairs():
    b = scene([Plane(30.0), Plane(5.0, (6, 0, 12, 12))])
    assert pdf.sample_pairs(b, pdf.RankingConfig()).edge.shape == (0, 2)


def test_global_pairs_span_two_planes():
    b = scene([Plane(30.0), Plane(5.0, (6, 0, 12, 12))], [SceneObject((0, 0, 3, 3), 12.0)])
    pairs = pdf.sample_pairs(b, pdf.RankingConfig(n_global_pairs=100))
    d = b.d_dense.ravel()
    assert pairs.global_.shape[0] > 0
    assert np.all({*d[pairs.global_].ravel()} <= {5.0, 30.0})
    assert np.all(d[pairs.global_[:, 0]] != d[pairs.global_[:, 1]])
    assert not b.instance_masks[0, 0].ravel()[pairs.global_].any()


def test_flat_scene_gives_no_pairs():
    b = scene([Plane(10.0)], [SceneObject((2, 2, 6, 6), 10.0)])
    pairs = pdf.sample_pairs(b, pdf.RankingConfig())
    assert pairs.edge.shape == (0, 2) and pairs.global_.shape == (0, 2)


def test_sampling_deterministic():
    b = random_scene(SplitMix64(5))
    cfg = pdf.RankingConfig(n_edge_pairs=40, n_global_pairs=40, rng_seed=9)
    p1, p2 = pdf.sample_pairs(b, cfg), pdf.sample_pairs(b, cfg)
    np.testing.assert_array_equal(p1.edge, p2.edge)
    np.testing.assert_array_equal(p1.global_, p2.global_)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**62), st.integers(1, 3))
def test_sampler_contracts_hold(seed, r):
    b = random_scene(SplitMix64(seed))
    cfg = pdf.RankingConfig(n_edge_pairs=24, n_global_pairs=24, dilation_radius=r)
    assert sampler_violations(b, cfg, pdf.sample_pairs(b, cfg, SplitMix64(seed))) == 0


def test_pairs_stay_within_one_image():
    from bevkit.synth import stack_scenes
    b = stack_scenes([scene([Plane(30.0)], [SceneObject((2, 2, 6, 6), 5.0)]),
                      scene([Plane(8.0), Plane(40.0, (0, 6, 12, 12))])])
    pairs = pdf.sample_pairs(b, pdf.RankingConfig(n_edge_pairs=50, n_global_pairs=50))
    hw = 144
    for pp in pairs:
        np.testing.assert_array_equal(pp[:, 0] // hw, pp[:, 1] // hw)


# relative and total ---------------------------------------------------------------------------

def _two_object_scene():
    return scene([Plane(30.0), Plane(12.0, (8, 0, 12, 12))],
                 [SceneObject((1, 1, 5, 5), 5.0), SceneObject((2, 7, 7, 11), 20.0, "ellipse")],
                 sparse_fraction=0.2)


def test_relative_loss_correct_order_below_softplus_tau():
    b = _two_object_scene()
    cfg = pdf.RankingConfig()
    rel, edge, glob = pdf.relative_loss(b.with_prediction(p_for_depth(b.d_dense)), BINS, cfg)
    assert rel < math.log1p(math.exp(-cfg.tau_abs))
    assert edge > 0 and glob > 0


def test_relative_loss_inverted_order_at_least_ln2():
    b = _two_object_scene()
    flipped = b.with_prediction(p_for_depth(71.0 - b.d_dense))
    _, edge, glob = pdf.relative_loss(flipped, BINS, pdf.RankingConfig())
    assert edge >= math.log(2) and glob >= math.log(2)


def test_relative_loss_weight_selection():
    b = _two_object_scene().with_prediction(softmax(np.random.default_rng(4).normal(size=(1, 70, 12, 12)), axis=1))
    rel, edge, _ = pdf.relative_loss(b, BINS, pdf.RankingConfig(w_edge=1.0, w_global=0.0))
    assert rel == edge


def test_total_loss_composition_and_report():
    b = _two_object_scene().with_prediction(softmax(np.random.default_rng(6).normal(size=(1, 70, 12, 12)), axis=1))
    w = pdf.DepthLossWeights()
    r = pdf.total_depth_loss(b, BINS, weights=w)
    assert r.l_depth == pytest.approx(0.1 * r.l_prob + r.l_found + 0.05 * r.l_relative, rel=1e-14)
    assert r.l_found == pytest.approx(0.01 * r.l_abs + 0.03 * r.l_dense, rel=1e-14)
    assert set(r.to_json()) == {"l_prob", "l_abs", "l_dense", "l_edge", "l_global", "l_relative", "l_depth",
                                "n_edge_pairs_used", "n_global_pairs_used"}
    zero = pdf.total_depth_loss(b, BINS, weights=pdf.DepthLossWeights(0, 0, 0, 0))
    assert zero.l_depth == 0.0


def test_total_loss_perfect_prediction_canonical_scene():
    batch = perfect_prediction(make_depth_scene(canonical_scene(), BINS), BINS)
    r = pdf.total_depth_loss(batch, BINS, weights=pdf.DepthLossWeights())
    assert r.l_depth < 1e-3
    assert r.n_edge_pairs_used > 0 and r.n_global_pairs_used > 0


def test_total_loss_flags_degenerate_batch():
    b = scene([Plane(10.0)], sparse_fraction=0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", pdf.EmptySupervisionWarning)
        r = pdf.total_depth_loss(b, BINS)
    assert "empty-sparse" in r.flags and "no-edge-pairs" in r.flags and "no-global-pairs" in r.flags


def test_batch_validation():
    b = _two_object_scene()
    b.validate(BINS)
    with pytest.raises(pdf.ShapeError, match="depth-bin"):
        b.validate(pdf.DepthBinSpec(D=10))
    bad = b.with_prediction(b.P * 2)
    with pytest.raises(ValueError, match="distribution"):
        bad.validate(BINS)
