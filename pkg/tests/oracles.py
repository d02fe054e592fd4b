"""Naive straight-line reference implementations, kept inside the test tree.

Everything here is written with explicit Python loops and scalar math so it
shares no code path with the package.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d(x, w, b=None, pad=0):
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((bsz, o, ho, wo))
    for n in range(bsz):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy, xi = y + i - pad, xx + j - pad
                                if 0 <= yy < h and 0 <= xi < wd:
                                    acc += float(x[n, ic, yy, xi]) * float(w[oc, ic, i, j])
                    out[n, oc, y, xx] = acc
    return out


def bilinear(feature, y, x):
    """Zero-padded bilinear read of a [C,H,W] map at real (y, x)."""
    c, h, w = feature.shape
    y0, x0 = math.floor(y), math.floor(x)
    out = np.zeros(c)
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < h and 0 <= xx < w:
                out += wy * wx * feature[:, yy, xx]
    return out


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def _map(fn, a):
    return np.vectorize(fn, otypes=[float])(a)


def dgtf_step(X, H_prev, p):
    """One fusion step written out pixel by pixel; returns (F_RC, H_t)."""
    k = p["k"]
    kk = k * k
    _, c, h, w = X.shape
    raw = conv2d(np.concatenate([X, H_prev], axis=1), p["offset_w"], p["offset_b"], k // 2)
    aligned = np.zeros_like(X)
    for o in range(c):
        for y in range(h):
            for x in range(w):
                acc = float(p["dcn_b"][o])
                for q in range(kk):
                    dy, dx = raw[0, 2 * q, y, x], raw[0, 2 * q + 1, y, x]
                    m = _sig(raw[0, 2 * kk + q, y, x])
                    v = bilinear(H_prev[0], y + q // k - k // 2 + dy, x + q % k - k // 2 + dx)
                    for ic in range(c):
                        acc += float(p["dcn_w"][o, ic, q // k, q % k]) * m * v[ic]
                aligned[0, o, y, x] = acc
    cat = np.concatenate([X, aligned], axis=1)
    r = _map(_sig, conv2d(cat, p["r_w"], p["r_b"], 1))
    z = _map(_sig, conv2d(cat, p["z_w"], p["z_b"], 1))
    cand = _map(math.tanh, conv2d(np.concatenate([X, r * aligned], axis=1), p["h_w"], p["h_b"], 1))
    H = (1 - z) * X + z * cand
    pad = p["out_w"].shape[-1] // 2
    return conv2d(H, p["out_w"], p["out_b"], pad), H


def igdr_forward(F_RC, E, S, p, temperature):
    """Instance-guided refinement with per-pixel loops; returns F_final."""
    n, ci = E.shape[:2]
    _, c, h, w = F_RC.shape
    if n == 0:
        return F_RC.copy()
    proto = np.zeros((n, ci))
    for i in range(n):
        pooled = [E[i, j].sum() / E[i, j].size for j in range(ci)]
        for a in range(ci):
            proto[i, a] = p["proj_b"][a] + sum(p["proj_w"][a, j] * pooled[j] for j in range(ci))
    E_bev = np.zeros((1, ci, h, w))
    occ = np.zeros((1, 1, h, w))
    for y in range(h):
        for x in range(w):
            logits = [S[0, i, y, x] / temperature for i in range(n)]
            top = max(logits)
            e = [math.exp(v - top) for v in logits]
            tot = sum(e)
            for a in range(ci):
                E_bev[0, a, y, x] = sum(e[i] / tot * proto[i, a] for i in range(n))
            occ[0, 0, y, x] = sum(S[0, i, y, x] for i in range(n))
    gamma = conv2d(E_bev, p["gamma_w"], p["gamma_b"], 1)
    beta = conv2d(E_bev, p["beta_w"], p["beta_b"], 1)
    G = _map(_sig, conv2d(occ, p["gate_w"], p["gate_b"], 1))
    return (1 - G) * F_RC + G * (F_RC * gamma + beta)
