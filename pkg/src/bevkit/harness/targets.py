"""Gradcheck registry: one builder per differentiable operation.

Tensor-valued operations are reduced to a scalar by a fixed random linear
functional ``sum(w * out)``, so the upstream gradient handed to the backward
pass is ``w`` itself.
"""

from __future__ import annotations

import numpy as np

from .. import dgtf, igdr, pdf, tensor
from ..rng import SplitMix64
from .gradcheck import GradProblem, register
from .instances import depth_batch, dgtf_problem, igdr_problem, small_ranking, uniform


def _as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def probe(rng: SplitMix64, inputs: dict, forward, backward) -> GradProblem:
    """Wrap ``forward(inputs) -> array(s)`` and ``backward(inputs, ws) -> grads``."""
    ws = tuple(uniform(rng, o.shape, -1.0, 1.0) for o in _as_tuple(forward(inputs)))

    def loss(d):
        return float(sum((w * o).sum() for w, o in zip(ws, _as_tuple(forward(d)))))

    return GradProblem(inputs, loss, lambda d: backward(d, ws if len(ws) > 1 else ws[0]))


# ---------------------------------------------------------------------------
# tensor core
# ---------------------------------------------------------------------------

@register("tensor.conv2d")
def _(rng):
    inputs = {"x": uniform(rng, (2, 3, 5, 5)), "w": uniform(rng, (4, 3, 3, 3)), "b": uniform(rng, (4,))}

    def fwd(d):
        return tensor.conv2d(d["x"], d["w"], d["b"], 1)

    def bwd(d, g):
        dx, dw, db = tensor.conv2d_backward(g, d["x"], d["w"], 1)
        return {"x": dx, "w": dw, "b": db}

    return probe(rng, inputs, fwd, bwd)


@register("tensor.bilinear_sample")
def _(rng):
    # coordinates kept off grid lines where the sampler has kinks
    inputs = {"feature": uniform(rng, (3, 5, 6)), "yx": np.array([1.37, 2.61])}

    def fwd(d):
        return tensor.bilinear_sample(d["feature"], d["yx"][0], d["yx"][1])

    def bwd(d, g):
        df, dy, dx = tensor.bilinear_sample_backward(g, d["feature"], d["yx"][0], d["yx"][1])
        return {"feature": df, "yx": np.array([dy, dx])}

    return probe(rng, inputs, fwd, bwd)


def _unary(name, fwd, bwd_from, lo=-2.0, hi=2.0):
    @register(f"tensor.{name}")
    def _(rng):
        inputs = {"x": uniform(rng, (3, 4), lo, hi)}
        return probe(rng, inputs, lambda d: fwd(d["x"]), lambda d, g: {"x": bwd_from(g, d["x"])})


_unary("sigmoid", tensor.sigmoid, lambda g, x: tensor.sigmoid_backward(g, tensor.sigmoid(x)))
_unary("tanh", tensor.tanh, lambda g, x: tensor.tanh_backward(g, tensor.tanh(x)))
_unary("softplus", tensor.softplus, tensor.softplus_backward)
_unary("exp", tensor.exp, lambda g, x: tensor.exp_backward(g, tensor.exp(x)))
_unary("log", tensor.log, tensor.log_backward, 0.5, 2.0)
_unary("scale", lambda x: tensor.scale(x, -1.7), lambda g, x: tensor.scale_backward(g, -1.7))
_unary("shift", lambda x: tensor.shift(x, 0.3), lambda g, x: tensor.shift_backward(g))


def _binary(name, fwd, bwd):
    @register(f"tensor.{name}")
    def _(rng):
        inputs = {"a": uniform(rng, (3, 4)), "b": uniform(rng, (3, 4))}

        def backward(d, g):
            da, db = bwd(g, d["a"], d["b"])
            return {"a": da, "b": db}

        return probe(rng, inputs, lambda d: fwd(d["a"], d["b"]), backward)


_binary("add", tensor.add, lambda g, a, b: tensor.add_backward(g))
_binary("sub", tensor.sub, lambda g, a, b: tensor.sub_backward(g))
_binary("mul", tensor.mul, tensor.mul_backward)


@register("tensor.softmax")
def _(rng):
    inputs = {"x": uniform(rng, (2, 5, 3))}

    def bwd(d, g):
        y = tensor.softmax(d["x"], axis=1, temperature=0.6)
        return {"x": tensor.softmax_backward(g, y, axis=1, temperature=0.6)}

    return probe(rng, inputs, lambda d: tensor.softmax(d["x"], axis=1, temperature=0.6), bwd)


@register("tensor.batched_matmul")
def _(rng):
    inputs = {"a": uniform(rng, (2, 3, 4)), "b": uniform(rng, (2, 4, 5))}

    def bwd(d, g):
        da, db = tensor.batched_matmul_backward(g, d["a"], d["b"])
        return {"a": da, "b": db}

    return probe(rng, inputs, lambda d: tensor.batched_matmul(d["a"], d["b"]), bwd)


@register("tensor.global_avg_pool")
def _(rng):
    inputs = {"x": uniform(rng, (3, 2, 4, 5))}
    return probe(rng, inputs, lambda d: tensor.global_avg_pool(d["x"]),
                 lambda d, g: {"x": tensor.global_avg_pool_backward(g, d["x"].shape)})


# ---------------------------------------------------------------------------
# depth losses (gradients w.r.t. the predicted distribution P)
# ---------------------------------------------------------------------------

def _loss_problem(rng, value, grad):
    batch, bins = depth_batch(rng)
    inputs = {"P": batch.P.copy()}

    def with_p(d):
        return batch.with_prediction(d["P"])

    return GradProblem(inputs, lambda d: float(value(with_p(d), bins)), lambda d: {"P": grad(with_p(d), bins)})


@register("pdf.kl_prob_loss")
def _(rng):
    # two-bin sigma keeps every target mass >~1e-3; far-tail gradients of
    # ~1e-12 sit below what central differences can resolve
    return _loss_problem(
        rng,
        lambda b, bins: pdf.kl_prob_loss(b, bins, 2.0 * bins.width),
        lambda b, bins: pdf.kl_prob_loss_backward(b, bins, 2.0 * bins.width),
    )


@register("pdf.expected_depth")
def _(rng):
    batch, bins = depth_batch(rng)
    return probe(rng, {"P": batch.P.copy()}, lambda d: pdf.expected_depth(d["P"], bins),
                 lambda d, g: {"P": pdf.expected_depth_backward(g, bins)})


@register("pdf.smooth_l1")
def _(rng):
    inputs = {"x": uniform(rng, (40,), -3.0, 3.0)}
    return probe(rng, inputs, lambda d: pdf.smooth_l1(d["x"], 0.8),
                 lambda d, g: {"x": g * pdf.smooth_l1_grad(d["x"], 0.8)})


@register("pdf.foundation_loss")
def _(rng):
    return _loss_problem(
        rng,
        lambda b, bins: pdf.foundation_loss(b, bins, 1.0, 0.01, 0.03)[0],
        lambda b, bins: pdf.foundation_loss_backward(b, bins, 1.0, 0.01, 0.03),
    )


@register("pdf.pair_rank_loss")
def _(rng):
    inputs = {"dhat_i": uniform(rng, (30,), 1.0, 9.0), "dhat_j": uniform(rng, (30,), 1.0, 9.0)}
    gi = uniform(rng, (30,), 1.0, 9.0)
    gj = uniform(rng, (30,), 1.0, 9.0)

    def bwd(d, g):
        a, b = pdf.pair_rank_loss_grad(d["dhat_i"], d["dhat_j"], gi, gj)
        return {"dhat_i": g * a, "dhat_j": g * b}

    return probe(rng, inputs, lambda d: pdf.pair_rank_loss(d["dhat_i"], d["dhat_j"], gi, gj), bwd)


@register("pdf.relative_loss")
def _(rng):
    cfg = small_ranking()
    batch, _ = depth_batch(rng)
    pairs = pdf.sample_pairs(batch, cfg)
    return _loss_problem(
        rng,
        lambda b, bins: pdf.relative_loss(b, bins, cfg, pairs=pairs)[0],
        lambda b, bins: pdf.relative_loss_backward(b, bins, cfg, pairs),
    )


@register("pdf.total_depth_loss")
def _(rng):
    cfg = small_ranking()
    weights = pdf.DepthLossWeights()
    batch, _ = depth_batch(rng)
    pairs = pdf.sample_pairs(batch, cfg)
    return _loss_problem(
        rng,
        lambda b, bins: pdf.total_depth_loss(b, bins, cfg, weights, pairs=pairs).l_depth,
        lambda b, bins: pdf.total_depth_loss_backward(b, bins, cfg, weights, pairs),
    )


# ---------------------------------------------------------------------------
# temporal fusion
# ---------------------------------------------------------------------------

def _dgtf_inputs(rng):
    X, H, params = dgtf_problem(rng)
    return {"X": X, "H_prev": H, **{k: v.copy() for k, v in params.tensors().items()}}, params.k


def _params(d, k):
    return dgtf.DgtfParams(**{n: d[n] for n in dgtf.TENSOR_FIELDS}, k=k)


@register("dgtf.predict_offsets")
def _(rng):
    full, k = _dgtf_inputs(rng)
    inputs = {n: full[n] for n in ("X", "H_prev", "offset_w", "offset_b")}

    def params(d):
        return _params({**full, **d}, k)

    def fwd(d):
        return dgtf.predict_offsets(d["X"], d["H_prev"], params(d))

    def bwd(d, gs):
        p = params(d)
        _, m = dgtf.predict_offsets(d["X"], d["H_prev"], p)
        dX, dH, dw, db = dgtf.predict_offsets_backward(gs[0], gs[1], d["X"], d["H_prev"], p, m)
        return {"X": dX, "H_prev": dH, "offset_w": dw, "offset_b": db}

    return probe(rng, inputs, fwd, bwd)


@register("dgtf.dcn_align")
def _(rng):
    X, H, params = dgtf_problem(rng)
    kk = params.k * params.k
    inputs = {
        "H_prev": H,
        "delta": uniform(rng, (1, 2 * kk) + H.shape[2:], -1.5, 1.5),
        "m": uniform(rng, (1, kk) + H.shape[2:], 0.05, 0.95),
        "dcn_w": params.dcn_w.copy(),
        "dcn_b": params.dcn_b.copy(),
    }

    def p(d):
        return params.replace(dcn_w=d["dcn_w"], dcn_b=d["dcn_b"])

    def bwd(d, g):
        dH, dd, dm, dw, db = dgtf.dcn_align_backward(g, d["H_prev"], d["delta"], d["m"], p(d))
        return {"H_prev": dH, "delta": dd, "m": dm, "dcn_w": dw, "dcn_b": db}

    return probe(rng, inputs, lambda d: dgtf.dcn_align(d["H_prev"], d["delta"], d["m"], p(d)), bwd)


@register("dgtf.gated_update")
def _(rng):
    X, H, params = dgtf_problem(rng)
    names = ("r_w", "r_b", "z_w", "z_b", "h_w", "h_b")
    inputs = {"X": X, "H_aligned": H, **{n: getattr(params, n).copy() for n in names}}

    def p(d):
        return params.replace(**{n: d[n] for n in names})

    def bwd(d, g):
        dX, dA, grads = dgtf.gated_update_backward(g, d["X"], d["H_aligned"], p(d))
        return {"X": dX, "H_aligned": dA, **grads}

    return probe(rng, inputs, lambda d: dgtf.gated_update(d["X"], d["H_aligned"], p(d)), bwd)


@register("dgtf.dgtf_step")
def _(rng):
    inputs, k = _dgtf_inputs(rng)

    def fwd(d):
        return dgtf.dgtf_forward(d["X"], d["H_prev"], _params(d, k)).F

    def bwd(d, g):
        p = _params(d, k)
        return dgtf.dgtf_backward(dgtf.dgtf_forward(d["X"], d["H_prev"], p), p, g)

    return probe(rng, inputs, fwd, bwd)


# ---------------------------------------------------------------------------
# instance-guided refinement
# ---------------------------------------------------------------------------

def _igdr_params(base: igdr.IgdrParams, d: dict) -> igdr.IgdrParams:
    return igdr.IgdrParams(**{n: d.get(n, getattr(base, n)) for n in igdr.TENSOR_FIELDS})


@register("igdr.pool_project")
def _(rng):
    inputs, params = igdr_problem(rng)
    d0 = {"E_features": inputs.E_features, "proj_w": params.proj_w.copy(), "proj_b": params.proj_b.copy()}

    def bwd(d, g):
        dE, dw, db = igdr.pool_project_backward(g, d["E_features"], _igdr_params(params, d))
        return {"E_features": dE, "proj_w": dw, "proj_b": db}

    return probe(rng, d0, lambda d: igdr.pool_project(d["E_features"], _igdr_params(params, d), 2), bwd)


@register("igdr.softmax_assign")
def _(rng):
    inputs, _ = igdr_problem(rng)
    tau = inputs.temperature

    def bwd(d, g):
        return {"S_BEV": igdr.softmax_assign_backward(g, igdr.softmax_assign(d["S_BEV"], tau), tau)}

    return probe(rng, {"S_BEV": inputs.S_BEV}, lambda d: igdr.softmax_assign(d["S_BEV"], tau), bwd)


@register("igdr.broadcast_prototypes")
def _(rng):
    inputs, _ = igdr_problem(rng)
    d0 = {"A_prob": igdr.softmax_assign(inputs.S_BEV), "E_proj": uniform(rng, (1, 3, 4))}

    def bwd(d, g):
        dA, dE = igdr.broadcast_prototypes_backward(g, d["A_prob"], d["E_proj"])
        return {"A_prob": dA, "E_proj": dE}

    return probe(rng, d0, lambda d: igdr.broadcast_prototypes(d["A_prob"], d["E_proj"]), bwd)


@register("igdr.gen_affine")
def _(rng):
    _, params = igdr_problem(rng)
    names = ("gamma_w", "gamma_b", "beta_w", "beta_b")
    d0 = {"E_BEV": uniform(rng, (1, 4, 5, 5)), **{n: getattr(params, n).copy() for n in names}}

    def bwd(d, gs):
        dE, grads = igdr.gen_affine_backward(gs[0], gs[1], d["E_BEV"], _igdr_params(params, d))
        return {"E_BEV": dE, **grads}

    return probe(rng, d0, lambda d: igdr.gen_affine(d["E_BEV"], _igdr_params(params, d)), bwd)


@register("igdr.calibrate")
def _(rng):
    shape = (1, 2, 5, 5)
    d0 = {"F_RC": uniform(rng, shape), "gamma": uniform(rng, shape), "beta": uniform(rng, shape)}

    def bwd(d, g):
        dF, dg, db = igdr.calibrate_backward(g, d["F_RC"], d["gamma"])
        return {"F_RC": dF, "gamma": dg, "beta": db}

    return probe(rng, d0, lambda d: igdr.calibrate(d["F_RC"], d["gamma"], d["beta"]), bwd)


@register("igdr.foreground_gate")
def _(rng):
    inputs, params = igdr_problem(rng)
    d0 = {"S_BEV": inputs.S_BEV, "gate_w": params.gate_w.copy(), "gate_b": params.gate_b.copy()}

    def bwd(d, g):
        p = _igdr_params(params, d)
        G = igdr.foreground_gate(d["S_BEV"], p)
        dS, dw, db = igdr.foreground_gate_backward(g, d["S_BEV"], p, G)
        return {"S_BEV": dS, "gate_w": dw, "gate_b": db}

    return probe(rng, d0, lambda d: igdr.foreground_gate(d["S_BEV"], _igdr_params(params, d)), bwd)


@register("igdr.gated_fuse")
def _(rng):
    d0 = {"F_RC": uniform(rng, (1, 2, 5, 5)), "F_calibrated": uniform(rng, (1, 2, 5, 5)),
          "G_bg": uniform(rng, (1, 1, 5, 5), 0.05, 0.95)}

    def bwd(d, g):
        a, b, c = igdr.gated_fuse_backward(g, d["F_RC"], d["F_calibrated"], d["G_bg"])
        return {"F_RC": a, "F_calibrated": b, "G_bg": c}

    return probe(rng, d0, lambda d: igdr.gated_fuse(d["F_RC"], d["F_calibrated"], d["G_bg"]), bwd)


@register("igdr.igdr_forward")
def _(rng):
    inputs, params = igdr_problem(rng)
    d0 = {"F_RC": inputs.F_RC, "E_features": inputs.E_features, "S_BEV": inputs.S_BEV,
          **{n: v.copy() for n, v in params.tensors().items()}}

    def split(d):
        return (igdr.IgdrInputs(d["F_RC"], d["E_features"], d["S_BEV"], inputs.temperature),
                _igdr_params(params, d))

    def fwd(d):
        return igdr.igdr_forward(*split(d)).F_final

    def bwd(d, g):
        i, p = split(d)
        return igdr.igdr_backward(i, p, igdr.igdr_forward(i, p), g)

    return probe(rng, d0, fwd, bwd)
