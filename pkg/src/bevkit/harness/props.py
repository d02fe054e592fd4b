"""Randomised property suites over every module.

Each property draws one random instance per trial and returns a violation
measure; the trial passes when the measure is at most the property's
tolerance.  The first failing trial's inputs are dumped as RTEN files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .. import dgtf, igdr, pdf, tensor
from ..io import save_tensors
from ..rng import SplitMix64, derive_seed
from ..synth import Plane, SceneObject, SceneSpec, make_depth_scene, shift_frame
from .instances import uniform
from .report import CheckReport

SUITES = ("tensor", "pdf", "dgtf", "igdr")


@dataclass
class Property:
    name: str
    tol: float
    trial: Callable[[SplitMix64], tuple[float, dict]]


PROPERTIES: dict[str, list[Property]] = {s: [] for s in SUITES}


def prop(suite: str, name: str, tol: float):
    def wrap(fn):
        PROPERTIES[suite].append(Property(name, tol, fn))
        return fn
    return wrap


def _int(rng: SplitMix64, lo: int, hi: int) -> int:
    """Uniform integer on [lo, hi]."""
    return lo + int(rng.integers(hi - lo + 1, 1)[0])


def conv2d_loops(x, w, b, pad):
    """Six-nested-loop cross-correlation used as the reference for conv2d."""
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((bsz, o, ho, wo))
    for n in range(bsz):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy, xi = y + i - pad, xx + j - pad
                                if 0 <= yy < h and 0 <= xi < wd:
                                    acc += x[n, ic, yy, xi] * w[oc, ic, i, j]
                    out[n, oc, y, xx] = acc
    return out


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

@prop("tensor", "conv2d_matches_loops", 1e-10)
def _(rng):
    k = (1, 3)[_int(rng, 0, 1)]
    x = uniform(rng, (_int(rng, 1, 2), _int(rng, 1, 3), _int(rng, k, 8), _int(rng, k, 8)))
    w = uniform(rng, (_int(rng, 1, 3), x.shape[1], k, k))
    b = uniform(rng, (w.shape[0],))
    pad = _int(rng, 0, k // 2)
    err = np.abs(tensor.conv2d(x, w, b, pad) - conv2d_loops(x, w, b, pad)).max()
    return float(err), {"x": x, "w": w, "b": b}


@prop("tensor", "softmax_normalised", 1e-12)
def _(rng):
    x = uniform(rng, (_int(rng, 1, 3), _int(rng, 1, 6), _int(rng, 1, 4)), -10, 10)
    tau = 0.05 + 2 * rng.uniform(1)[0]
    y = tensor.softmax(x, axis=1, temperature=tau)
    bad = max(float(np.abs(y.sum(axis=1) - 1).max()), float(-min(y.min(), 0.0)))
    return bad, {"x": x}


@prop("tensor", "softmax_shift_invariant", 1e-12)
def _(rng):
    x = uniform(rng, (2, _int(rng, 1, 6), 3))
    c = uniform(rng, (2, 1, 3), -5, 5)
    diff = np.abs(tensor.softmax(x, axis=1) - tensor.softmax(x + c, axis=1)).max()
    return float(diff), {"x": x, "c": c}


@prop("tensor", "bilinear_exact_at_integers", 0.0)
def _(rng):
    f = uniform(rng, (2, _int(rng, 1, 6), _int(rng, 1, 6)))
    y, x = _int(rng, 0, f.shape[1] - 1), _int(rng, 0, f.shape[2] - 1)
    return float(np.abs(tensor.bilinear_sample(f, y, x) - f[:, y, x]).max()), {"feature": f}


@prop("tensor", "bilinear_lipschitz", 1.0)
def _(rng):
    f = uniform(rng, (2, 5, 5))
    y, x = uniform(rng, (2,), -1.0, 5.0)
    eps = 1e-6 * rng.uniform(2)
    change = np.abs(tensor.bilinear_sample(f, y + eps[0], x + eps[1]) - tensor.bilinear_sample(f, y, x)).max()
    bound = 4 * eps.max() * np.abs(f).max()
    return float(change / bound), {"feature": f, "yx": np.array([y, x]), "eps": eps}


# ---------------------------------------------------------------------------
# pdf
# ---------------------------------------------------------------------------

def random_scene(rng: SplitMix64, flat: bool = False) -> pdf.DepthSupervisionBatch:
    """Random planes and rect/ellipse objects on a small grid."""
    h, w = _int(rng, 8, 16), _int(rng, 8, 16)
    depth = 2.0 + 58.0 * rng.uniform(8)
    planes = [Plane(float(depth[0]))]
    if rng.uniform(1)[0] < 0.5:
        planes.append(Plane(float(depth[1]), (_int(rng, 0, h - 1), 0, h, w)))
    objects = []
    for n in range(_int(rng, 0, 3)):
        y0, x0 = _int(rng, 0, h - 2), _int(rng, 0, w - 2)
        box = (y0, x0, _int(rng, y0 + 1, h), _int(rng, x0 + 1, w))
        objects.append(SceneObject(box, float(depth[2 + n]), ("rect", "ellipse")[_int(rng, 0, 1)]))
    if flat:
        planes = [Plane(float(depth[0]), p.box) for p in planes]
        objects = [SceneObject(o.box, float(depth[0]), o.shape) for o in objects]
    spec = SceneSpec(w, h, planes, objects, sparse_fraction=0.2, seed=int(rng.next_u64(1)[0] >> 1))
    return make_depth_scene(spec)


def _ranking(rng):
    return pdf.RankingConfig(n_edge_pairs=_int(rng, 1, 32), n_global_pairs=_int(rng, 1, 32),
                             dilation_radius=_int(rng, 1, 3))


def sampler_violations(batch: pdf.DepthSupervisionBatch, cfg: pdf.RankingConfig, pairs: pdf.RankingPairs) -> int:
    """Count pairs breaking the ring/interior, background and tolerance rules."""
    b_, k_, h, w = batch.instance_masks.shape
    hw = h * w
    inst = (batch.instance_masks > 0.5).reshape(b_, k_, hw)
    rings = np.stack([
        np.stack([pdf.dilated_ring(batch.instance_masks[b, k] > 0.5, cfg.dilation_radius).ravel()
                  for k in range(k_)]) if k_ else np.zeros((0, hw), bool)
        for b in range(b_)
    ])
    d = batch.d_dense.ravel()
    dense = (batch.mask_dense > 0.5).ravel()
    bad = 0
    for kind, pp in (("edge", pairs.edge), ("global", pairs.global_)):
        if pp.shape[0] == 0:
            continue
        i, j = pp[:, 0], pp[:, 1]
        bi, pi = np.divmod(i, hw)
        bj, pj = np.divmod(j, hw)
        ok = (bi == bj) & dense[i] & dense[j]
        tau = np.maximum(cfg.tau_abs, cfg.tau_rel * (d[i] + d[j]) / 2)
        ok &= np.abs(d[i] - d[j]) > tau
        if kind == "edge":
            ok &= (rings[bi, :, pi] & inst[bi, :, pj]).any(axis=1) if k_ else False
        else:
            ok &= ~inst[bi, :, pi].any(axis=1) & ~inst[bj, :, pj].any(axis=1)
        bad += int((~ok).sum())
    return bad


@prop("pdf", "sampler_contracts", 0.0)
def _(rng):
    cfg = _ranking(rng)
    batch = random_scene(rng)
    seed = int(rng.next_u64(1)[0] >> 1)
    pairs = pdf.sample_pairs(batch, cfg, SplitMix64(seed))
    bad = sampler_violations(batch, cfg, pairs)
    # the same geometry at a single depth has no pair above tolerance
    flat = replace(batch, d_dense=np.full_like(batch.d_dense, batch.d_dense.flat[0]))
    flat_pairs = pdf.sample_pairs(flat, cfg, SplitMix64(seed))
    bad += flat_pairs.edge.shape[0] + flat_pairs.global_.shape[0]
    return float(bad), {"d_dense": batch.d_dense, "instance_masks": batch.instance_masks}


@prop("pdf", "kl_nonnegative_and_zero_at_target", 1e-9)
def _(rng):
    bins = pdf.DepthBinSpec(1.0, 1.0 + _int(rng, 2, 20), _int(rng, 2, 20))
    b, h, w = 1, _int(rng, 1, 5), _int(rng, 1, 5)
    d = bins.d_min + (bins.d_max - bins.d_min) * rng.uniform(h * w).reshape(b, h, w)
    mask = (rng.uniform(h * w) < 0.7).reshape(b, h, w).astype(float)
    mask.flat[0] = 1.0
    P = tensor.softmax(uniform(rng, (b, bins.D, h, w), -3, 3), axis=1)
    batch = pdf.DepthSupervisionBatch(P, d, mask, d, mask, np.zeros((b, 0, h, w)))
    target = pdf.gaussian_targets(d, bins).transpose(0, 3, 1, 2)
    at_target = pdf.kl_prob_loss(batch.with_prediction(target), bins)
    return max(-pdf.kl_prob_loss(batch, bins), abs(at_target)), {"P": P, "d": d, "mask": mask}


@prop("pdf", "pair_loss_symmetric", 0.0)
def _(rng):
    a, b, gi, gj = uniform(rng, (4, 16), 1, 60)
    diff = np.abs(pdf.pair_rank_loss(a, b, gi, gj) - pdf.pair_rank_loss(b, a, gj, gi)).max()
    return float(diff), {"values": np.stack([a, b, gi, gj])}


@prop("pdf", "pair_loss_monotone", 0.0)
def _(rng):
    gi, gj = uniform(rng, (2,), 1, 60)
    margins = np.sort(uniform(rng, (64,), -20, 20))
    s = np.sign(gi - gj)
    losses = pdf.pair_rank_loss(10 + s * margins, np.full(64, 10.0), gi, gj)
    return float((np.diff(losses) >= 0).sum()), {"margins": margins}


@prop("pdf", "ring_disjoint_and_within_radius", 0.0)
def _(rng):
    h, w = _int(rng, 3, 12), _int(rng, 3, 12)
    mask = rng.uniform(h * w).reshape(h, w) < 0.15 * rng.uniform(1)[0] * 3
    r = _int(rng, 1, 3)
    ring = pdf.dilated_ring(mask, r)
    ys, xs = np.nonzero(mask)
    expected = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if not mask[y, x] and ys.size:
                expected[y, x] = (np.maximum(np.abs(ys - y), np.abs(xs - x)) <= r).any()
    return float((ring != expected).sum() + (ring & mask).sum()), {"mask": mask.astype(float)}


# ---------------------------------------------------------------------------
# dgtf
# ---------------------------------------------------------------------------

def _dgtf_random(rng, max_c=4, max_hw=10):
    c = _int(rng, 1, max_c)
    h, w = _int(rng, 3, max_hw), _int(rng, 3, max_hw)
    params = dgtf.DgtfParams.init(c, rng=rng, scale=0.3)
    return uniform(rng, (1, c, h, w)), uniform(rng, (1, c, h, w)), params


@prop("dgtf", "dcn_degenerate_equals_conv", 1e-10)
def _(rng):
    _, H, params = _dgtf_random(rng)
    kk = params.k ** 2
    delta = np.zeros((1, 2 * kk) + H.shape[2:])
    m = np.ones((1, kk) + H.shape[2:])
    err = np.abs(dgtf.dcn_align(H, delta, m, params) - tensor.conv2d(H, params.dcn_w, params.dcn_b, params.k // 2)).max()
    return float(err), {"H_prev": H, **params.tensors()}


@prop("dgtf", "gate_ranges", 0.0)
def _(rng):
    X, H, params = _dgtf_random(rng)
    g = dgtf.gated_update_intermediates(X, H, params)
    bad = sum(int(((a <= 0) | (a >= 1)).sum()) for a in (g["r"], g["z"]))
    bad += int((np.abs(g["cand"]) >= 1).sum())
    _, m = dgtf.predict_offsets(X, H, params)
    bad += int(((m <= 0) | (m >= 1)).sum())
    return float(bad), {"X": X, "H_aligned": H, **params.tensors()}


@prop("dgtf", "blend_convex", 1e-12)
def _(rng):
    X, H, params = _dgtf_random(rng)
    g = dgtf.gated_update_intermediates(X, H, params)
    lo, hi = np.minimum(X, g["cand"]), np.maximum(X, g["cand"])
    over = max(float((g["H"] - hi).max()), float((lo - g["H"]).max()), 0.0)
    return over, {"X": X, "H_aligned": H, **params.tensors()}


@prop("dgtf", "shift_compensation", 1e-10)
def _(rng):
    _, H, params = _dgtf_random(rng, max_hw=10)
    H = uniform(rng, (1, H.shape[1], 10, 10))
    dy, dx = _int(rng, -2, 2), _int(rng, -2, 2)
    kk = params.k ** 2
    current = shift_frame(H, dy, dx)
    delta = np.zeros((1, 2 * kk, 10, 10))
    delta[:, 0::2] = -dy
    delta[:, 1::2] = -dx
    m = np.ones((1, kk, 10, 10))
    a = dgtf.dcn_align(H, delta, m, params)
    b = tensor.conv2d(current, params.dcn_w, params.dcn_b, params.k // 2)
    band = params.k // 2 + max(abs(dy), abs(dx))
    err = np.abs(a - b)[..., band:10 - band, band:10 - band].max()
    return float(err), {"H_prev": H, "shift": np.array([dy, dx], float)}


# ---------------------------------------------------------------------------
# igdr
# ---------------------------------------------------------------------------

def _igdr_random(rng, identity=False):
    c, ci, n = _int(rng, 1, 4), _int(rng, 1, 4), _int(rng, 1, 5)
    h, w = _int(rng, 2, 8), _int(rng, 2, 8)
    params = igdr.IgdrParams.identity(c, ci) if identity else igdr.IgdrParams.init(c, ci, rng=rng, scale=0.4)
    inputs = igdr.IgdrInputs(
        uniform(rng, (1, c, h, w), -3, 3),
        uniform(rng, (n, ci, _int(rng, 1, 4), _int(rng, 1, 4))),
        uniform(rng, (1, n, h, w), 0, 3),
        temperature=0.1 + 2 * rng.uniform(1)[0],
    )
    return inputs, params


def _igdr_dump(inputs, params):
    return {"F_RC": inputs.F_RC, "E_features": inputs.E_features, "S_BEV": inputs.S_BEV, **params.tensors()}


@prop("igdr", "assignment_normalised_and_shift_invariant", 1e-12)
def _(rng):
    inputs, _ = _igdr_random(rng)
    A = igdr.softmax_assign(inputs.S_BEV, inputs.temperature)
    shifted = igdr.softmax_assign(inputs.S_BEV + uniform(rng, (1, 1) + inputs.S_BEV.shape[2:], 0, 5),
                                  inputs.temperature)
    bad = max(float(np.abs(A.sum(axis=1) - 1).max()), float(np.abs(A - shifted).max()), float(-min(A.min(), 0)))
    return bad, {"S_BEV": inputs.S_BEV}


@prop("igdr", "gate_range", 0.0)
def _(rng):
    inputs, params = _igdr_random(rng)
    G = igdr.igdr_forward(inputs, params).G_bg
    return float(((G <= 0) | (G >= 1)).sum()), _igdr_dump(inputs, params)


@prop("igdr", "fuse_convex", 1e-12)
def _(rng):
    inputs, params = _igdr_random(rng)
    out = igdr.igdr_forward(inputs, params)
    lo = np.minimum(inputs.F_RC, out.F_calibrated)
    hi = np.maximum(inputs.F_RC, out.F_calibrated)
    return max(float((out.F_final - hi).max()), float((lo - out.F_final).max()), 0.0), _igdr_dump(inputs, params)


@prop("igdr", "identity_at_init", 0.0)
def _(rng):
    inputs, params = _igdr_random(rng, identity=True)
    out = igdr.igdr_forward(inputs, params)
    return float(np.abs(out.F_final - inputs.F_RC).max()), _igdr_dump(inputs, params)


@prop("igdr", "gate_depends_only_on_sum", 0.0)
def _(rng):
    inputs, params = _igdr_random(rng)
    # dyadic scores make every per-pixel sum exact in any order
    S = np.round(inputs.S_BEV * 8) / 8
    total = S.sum(axis=1, keepdims=True)
    weights = rng.uniform(S.size).reshape(S.shape)
    moved = np.zeros_like(S)
    moved[:, :-1] = np.floor(total * weights[:, :1] * 8) / 8 if S.shape[1] > 1 else 0
    moved[:, -1:] = total - moved[:, :-1].sum(axis=1, keepdims=True)
    diff = np.abs(igdr.foreground_gate(S, params) - igdr.foreground_gate(moved, params)).max()
    return float(diff), {"S_BEV": S, "S_moved": moved}


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

def run_property(suite: str, p: Property, seed: int, trials: int, report: CheckReport,
                 dump_dir: Path | None = None) -> None:
    rng = SplitMix64(derive_seed(seed, suite, p.name))
    worst = 0.0
    failed = 0
    t0 = time.perf_counter()
    for t in range(trials):
        value, inputs = p.trial(rng)
        worst = max(worst, value)
        if not value <= p.tol:
            if failed == 0 and dump_dir is not None:
                save_tensors({k: np.asarray(v, float) for k, v in inputs.items()},
                             Path(dump_dir) / suite / p.name / f"trial_{t}",
                             {"suite": suite, "property": p.name, "trial": t, "seed": seed, "value": value})
            failed += 1
    report.add(f"{suite}.{p.name}", failed == 0, worst, p.tol, (time.perf_counter() - t0) * 1e3)


def run_props(suite: str = "all", seed: int = 42, trials: int = 100,
              dump_dir: Path | str | None = None, only: str | None = None) -> CheckReport:
    """Run ``trials`` random trials of every property in ``suite`` (or ``all``)."""
    if suite != "all" and suite not in PROPERTIES:
        raise KeyError(f"unknown suite {suite!r}; choose from {', '.join(SUITES + ('all',))}")
    report = CheckReport(f"props:{suite}", seed=seed, config={"trials": trials})
    if trials <= 0:
        return report
    for s in SUITES if suite == "all" else (suite,):
        for p in PROPERTIES[s]:
            if only is None or p.name == only:
                run_property(s, p, seed, trials, report, None if dump_dir is None else Path(dump_dir))
    return report
