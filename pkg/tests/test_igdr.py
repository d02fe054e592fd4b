from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bevkit import igdr
from bevkit.harness.instances import igdr_problem, igdr_scene
from bevkit.rng import SplitMix64
from bevkit.tensor import ShapeError


def inputs(seed=0, c=2, ci=4, n=3, h=5, w=5, tau=0.7):
    rng = np.random.default_rng(seed)
    return igdr.IgdrInputs(rng.uniform(-2, 2, (1, c, h, w)), rng.uniform(-2, 2, (n, ci, 4, 3)),
                           rng.uniform(0, 3, (1, n, h, w)), tau)


def noisy(c=2, ci=4, seed=1):
    return igdr.IgdrParams.init(c, ci, rng=SplitMix64(seed), scale=0.4)


# prototypes ------------------------------------------------------------------------------

def test_pool_project_constant_identity():
    p = igdr.IgdrParams.identity(2, 3)
    E = np.full((2, 3, 4, 4), 1.25)
    out = igdr.pool_project(E, p, batch=2)
    assert out.shape == (2, 2, 3)
    np.testing.assert_array_equal(out, 1.25)


def test_pool_project_zero_map():
    p = igdr.IgdrParams.identity(2, 3)
    p.proj_w[:] = 0
    np.testing.assert_array_equal(igdr.pool_project(np.ones((2, 3, 2, 2)), p), 0.0)


def test_pool_project_loop_oracle():
    p = noisy()
    E = inputs().E_features
    ref = np.zeros((3, 4))
    for n in range(3):
        pooled = [E[n, j].mean() for j in range(4)]
        for a in range(4):
            ref[n, a] = p.proj_b[a] + sum(p.proj_w[a, j] * pooled[j] for j in range(4))
    np.testing.assert_allclose(igdr.pool_project(E, p)[0], ref, atol=1e-12, rtol=0)


# assignment -----------------------------------------------------------------------------

def test_assign_examples():
    np.testing.assert_array_equal(igdr.softmax_assign(np.random.default_rng(2).uniform(0, 2, (1, 1, 3, 3))), 1.0)
    np.testing.assert_allclose(igdr.softmax_assign(np.full((1, 4, 2, 2), 0.7)), 0.25, rtol=0, atol=1e-16)
    A = igdr.softmax_assign(np.array([1.0, 0.0]).reshape(1, 2, 1, 1), 0.1)
    assert A[0, 0, 0, 0] > 0.9999
    with pytest.raises(ValueError):
        igdr.softmax_assign(np.zeros((1, 2, 1, 1)), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.floats(0.05, 5.0), st.floats(-50, 50))
def test_assign_normalised_and_shift_invariant(seed, n, tau, c):
    S = np.random.default_rng(seed).uniform(0, 5, (1, n, 4, 3))
    A = igdr.softmax_assign(S, tau)
    assert np.abs(A.sum(axis=1) - 1).max() <= 1e-12
    np.testing.assert_allclose(igdr.softmax_assign(S + c, tau), A, atol=1e-12)


def test_broadcast_examples_and_oracle():
    rng = np.random.default_rng(3)
    E_proj = rng.normal(size=(1, 3, 4))
    one = igdr.broadcast_prototypes(np.ones((1, 1, 2, 2)), E_proj[:, :1])
    np.testing.assert_array_equal(one, np.broadcast_to(E_proj[0, 0][None, :, None, None], (1, 4, 2, 2)))
    A = igdr.softmax_assign(rng.uniform(0, 3, (1, 3, 3, 2)))
    A[0, :, 1, 1] = [0, 1, 0]
    out = igdr.broadcast_prototypes(A, E_proj)
    np.testing.assert_array_equal(out[0, :, 1, 1], E_proj[0, 1])
    for y in range(3):
        for x in range(2):
            ref = sum(A[0, n, y, x] * E_proj[0, n] for n in range(3))
            np.testing.assert_allclose(out[0, :, y, x], ref, atol=1e-12, rtol=0)


# calibration and gating ---------------------------------------------------------------------

def test_gen_affine_identity_and_bias():
    p = igdr.IgdrParams.identity(2, 3)
    g, b = igdr.gen_affine(np.random.default_rng(4).normal(size=(1, 3, 4, 4)), p)
    np.testing.assert_array_equal(g, 1.0)
    np.testing.assert_array_equal(b, 0.0)
    q = noisy(2, 3)
    g, b = igdr.gen_affine(np.zeros((1, 3, 4, 4)), q)
    np.testing.assert_array_equal(g, np.broadcast_to(q.gamma_b[None, :, None, None], g.shape))
    np.testing.assert_array_equal(b, np.broadcast_to(q.beta_b[None, :, None, None], b.shape))


def test_gen_affine_conv_oracle():
    q = noisy(2, 3)
    E = np.random.default_rng(5).normal(size=(1, 3, 4, 5))
    g, b = igdr.gen_affine(E, q)
    np.testing.assert_allclose(g, oracles.conv2d(E, q.gamma_w, q.gamma_b, 1), atol=1e-12)
    np.testing.assert_allclose(b, oracles.conv2d(E, q.beta_w, q.beta_b, 1), atol=1e-12)


def test_calibrate_examples():
    F = np.random.default_rng(6).normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(igdr.calibrate(F, np.ones_like(F), np.zeros_like(F)), F)
    beta = np.full_like(F, 0.3)
    np.testing.assert_array_equal(igdr.calibrate(F, np.zeros_like(F), beta), beta)
    assert igdr.calibrate(np.full((1, 1, 1, 1), 0.5), np.full((1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1), -1.0))[0, 0, 0, 0] == 0
    with pytest.raises(ShapeError):
        igdr.calibrate(F, F[:, :1], F)


def test_gate_examples():
    p = igdr.IgdrParams.identity(2, 3)
    np.testing.assert_array_equal(igdr.foreground_gate(np.zeros((1, 3, 4, 4)), p), 0.5)
    p.gate_b[:] = -20.0
    assert igdr.foreground_gate(np.zeros((1, 3, 4, 4)), p).max() < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 5))
def test_gate_depends_only_on_sum(seed, n):
    rng = np.random.default_rng(seed)
    p = noisy(seed=seed % 1000)
    # quarter-integer scores keep every per-pixel sum exact
    S = rng.integers(0, 12, (1, n, 4, 4)) / 4.0
    T = np.zeros_like(S)
    T[:, 0] = S.sum(axis=1)
    assert np.array_equal(igdr.foreground_gate(S, p), igdr.foreground_gate(T, p))
    G = igdr.foreground_gate(S, p)
    assert np.all((G > 0) & (G < 1))


def test_fuse_examples():
    rng = np.random.default_rng(7)
    F, C = rng.normal(size=(2, 1, 2, 3, 3))
    np.testing.assert_array_equal(igdr.gated_fuse(F, C, np.zeros((1, 1, 3, 3))), F)
    np.testing.assert_array_equal(igdr.gated_fuse(F, C, np.ones((1, 1, 3, 3))), C)
    np.testing.assert_allclose(igdr.gated_fuse(F, C, np.full((1, 1, 3, 3), 0.5)), (F + C) / 2, rtol=1e-15)
    with pytest.raises(ShapeError):
        igdr.gated_fuse(F, C, np.full((1, 2, 3, 3), 0.5))


# composition -------------------------------------------------------------------------------

def test_forward_matches_straight_line_oracle():
    for inp, p in (igdr_problem(SplitMix64(8)), igdr_scene()):
        out = igdr.igdr_forward(inp, p)
        ref = oracles.igdr_forward(inp.F_RC, inp.E_features, inp.S_BEV, p.tensors(), inp.temperature)
        assert np.abs(out.F_final - ref).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_identity_init_is_exact_identity(seed):
    inp = inputs(seed)
    out = igdr.igdr_forward(inp, igdr.IgdrParams.identity(2, 4))
    assert np.array_equal(out.F_final, inp.F_RC)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_fuse_convexity(seed):
    inp = inputs(seed)
    out = igdr.igdr_forward(inp, noisy(seed=seed % 997))
    lo = np.minimum(inp.F_RC, out.F_calibrated)
    hi = np.maximum(inp.F_RC, out.F_calibrated)
    assert np.all(out.F_final >= lo - 1e-12) and np.all(out.F_final <= hi + 1e-12)


def test_no_instances_passthrough():
    inp = inputs(9)
    empty = igdr.IgdrInputs(inp.F_RC, inp.E_features[:0], inp.S_BEV[:, :0], 1.0)
    out = igdr.igdr_forward(empty, noisy())
    np.testing.assert_array_equal(out.F_final, inp.F_RC)
    assert out.passthrough and "no-instance passthrough" in out.flags


@pytest.mark.parametrize("mutate,exc", [
    (lambda i: igdr.IgdrInputs(i.F_RC, i.E_features[:2], i.S_BEV, 1.0), ShapeError),
    (lambda i: igdr.IgdrInputs(i.F_RC, i.E_features, -i.S_BEV, 1.0), ValueError),
    (lambda i: igdr.IgdrInputs(i.F_RC, i.E_features, i.S_BEV, 0.0), ValueError),
    (lambda i: igdr.IgdrInputs(i.F_RC, i.E_features, i.S_BEV[..., :4], 1.0), ShapeError),
])
def test_input_validation(mutate, exc):
    with pytest.raises(exc):
        igdr.igdr_forward(mutate(inputs(10)), noisy())


def test_intermediates_dump_and_params_roundtrip(tmp_path):
    from bevkit.io import read_rten
    inp, p = igdr_scene()
    out = igdr.igdr_forward(inp, p)
    out.dump(tmp_path / "dump")
    tensors = {f.stem: read_rten(f) for f in (tmp_path / "dump").glob("*.rten")}
    assert {"F_final", "A_prob", "E_BEV", "gamma", "beta", "G_bg"} <= set(tensors)
    np.testing.assert_array_equal(tensors["F_final"], out.F_final)
    p.save(tmp_path / "params")
    q = igdr.IgdrParams.load(tmp_path / "params")
    for name, t in p.tensors().items():
        np.testing.assert_array_equal(getattr(q, name), t)
