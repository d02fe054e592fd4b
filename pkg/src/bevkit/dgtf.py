"""Deformable gated temporal fusion of BEV feature maps.

One step aligns the previous hidden map to the current frame with a
modulated deformable convolution whose offsets and masks are predicted from
both maps, then blends the aligned history with the current frame through
GRU-style reset/update gates.  ``F_RC = conv_out(H_t)`` is emitted while
``H_t`` itself is carried to the next step.

Offset channel layout: for kernel tap ``q`` in row-major order, channels
``2q`` and ``2q+1`` hold ``(dy, dx)``; channels ``2k^2 .. 3k^2-1`` hold the
mask logits.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .io import load_tensors, save_tensors
from .rng import SplitMix64
from .tensor import (
    ShapeError,
    bilinear_gather,
    bilinear_gather_backward,
    conv2d,
    conv2d_backward,
    same_padding,
    sigmoid,
    tanh,
)

TENSOR_FIELDS = (
    "offset_w", "offset_b",
    "dcn_w", "dcn_b",
    "r_w", "r_b",
    "z_w", "z_b",
    "h_w", "h_b",
    "out_w", "out_b",
)


@dataclass
class DgtfParams:
    offset_w: np.ndarray  # [3k^2, 2C, k, k]
    offset_b: np.ndarray  # [3k^2]
    dcn_w: np.ndarray  # [C, C, k, k]
    dcn_b: np.ndarray  # [C]
    r_w: np.ndarray  # [C, 2C, 3, 3]
    r_b: np.ndarray
    z_w: np.ndarray
    z_b: np.ndarray
    h_w: np.ndarray
    h_b: np.ndarray
    out_w: np.ndarray  # [C, C, ko, ko], odd ko
    out_b: np.ndarray
    k: int = 3
    deformable_groups: int = 1

    def __post_init__(self):
        for name in TENSOR_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.validate()

    @property
    def channels(self) -> int:
        return self.dcn_w.shape[0]

    def validate(self) -> None:
        if self.deformable_groups != 1:
            raise ValueError("only deformable_groups=1 is supported")
        c, k = self.channels, self.k
        expect = {
            "offset_w": (3 * k * k, 2 * c, k, k),
            "offset_b": (3 * k * k,),
            "dcn_w": (c, c, k, k),
            "dcn_b": (c,),
        }
        for g in ("r", "z", "h"):
            expect[f"{g}_w"] = (c, 2 * c) + getattr(self, f"{g}_w").shape[2:]
            expect[f"{g}_b"] = (c,)
        expect["out_w"] = (c, c) + self.out_w.shape[2:]
        expect["out_b"] = (c,)
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"{name}: expected {shape}, got {got}")
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name}: non-finite values")

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_FIELDS}

    def replace(self, **updates) -> "DgtfParams":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(updates)
        return DgtfParams(**values)

    @classmethod
    def init(cls, channels: int, k: int = 3, rng: SplitMix64 | None = None,
             scale: float = 0.1) -> "DgtfParams":
        """Seeded random initialisation with weights ~ N(0, scale^2)."""
        rng = SplitMix64(0) if rng is None else rng
        c = channels

        def draw(*shape):
            return scale * rng.normal(int(np.prod(shape))).reshape(shape)

        return cls(
            offset_w=draw(3 * k * k, 2 * c, k, k), offset_b=draw(3 * k * k),
            dcn_w=draw(c, c, k, k), dcn_b=draw(c),
            r_w=draw(c, 2 * c, 3, 3), r_b=draw(c),
            z_w=draw(c, 2 * c, 3, 3), z_b=draw(c),
            h_w=draw(c, 2 * c, 3, 3), h_b=draw(c),
            out_w=draw(c, c, 3, 3), out_b=draw(c),
            k=k,
        )

    def save(self, directory) -> None:
        save_tensors(self.tensors(), directory, {
            "k": self.k, "deformable_groups": self.deformable_groups, "channels": self.channels,
        })

    @classmethod
    def load(cls, directory) -> "DgtfParams":
        tensors, meta = load_tensors(directory)
        params = cls(**tensors, k=meta["k"], deformable_groups=meta["deformable_groups"])
        if params.channels != meta["channels"]:
            raise ShapeError(f"manifest says {meta['channels']} channels, tensors have {params.channels}")
        return params


@dataclass
class DgtfState:
    H: np.ndarray | None = None
    initialized: bool = False


def _check_pair(X, H):
    if X.ndim != 4:
        raise ShapeError(f"X_t must be [B,C,H,W], got {X.shape}")
    if X.shape != H.shape:
        raise ShapeError(f"X_t {X.shape} and H_prev {H.shape} differ")


def _conv_same(x, w, b):
    return conv2d(x, w, b, same_padding(w))


def _conv_same_backward(g, x, w):
    return conv2d_backward(g, x, w, same_padding(w))


# ---------------------------------------------------------------------------
# motion-aware alignment
# ---------------------------------------------------------------------------

def predict_offsets(X, H_prev, params: DgtfParams):
    """Return raw offsets [B,2k^2,H,W] and sigmoid masks [B,k^2,H,W]."""
    X = np.asarray(X, np.float64)
    H_prev = np.asarray(H_prev, np.float64)
    _check_pair(X, H_prev)
    raw = _conv_same(np.concatenate([X, H_prev], axis=1), params.offset_w, params.offset_b)
    kk = params.k * params.k
    return raw[:, :2 * kk], sigmoid(raw[:, 2 * kk:])


def predict_offsets_backward(d_delta, d_m, X, H_prev, params: DgtfParams, m):
    """Return ``(dX, dH_prev, d_offset_w, d_offset_b)``; ``m`` is the forward mask."""
    c = X.shape[1]
    d_raw = np.concatenate([d_delta, d_m * m * (1.0 - m)], axis=1)
    cat = np.concatenate([X, H_prev], axis=1)
    d_cat, dw, db = _conv_same_backward(d_raw, cat, params.offset_w)
    return d_cat[:, :c], d_cat[:, c:], dw, db


def sample_positions(delta, k: int):
    """Absolute sampling coordinates ``(py, px)``, each [B,k^2,H,W]."""
    b_, _, h, w = delta.shape
    q = np.arange(k * k)
    ty = (q // k - k // 2).astype(np.float64)[None, :, None, None]
    tx = (q % k - k // 2).astype(np.float64)[None, :, None, None]
    gy = np.arange(h, dtype=np.float64)[None, None, :, None]
    gx = np.arange(w, dtype=np.float64)[None, None, None, :]
    return gy + ty + delta[:, 0::2], gx + tx + delta[:, 1::2]


def _dcn_check(H_prev, delta, m, k):
    b_, _, h, w = H_prev.shape
    if delta.shape != (b_, 2 * k * k, h, w):
        raise ShapeError(f"offsets: expected {(b_, 2 * k * k, h, w)}, got {delta.shape}")
    if m.shape != (b_, k * k, h, w):
        raise ShapeError(f"mask: expected {(b_, k * k, h, w)}, got {m.shape}")


def dcn_align(H_prev, delta, m, params: DgtfParams) -> np.ndarray:
    """Modulated deformable convolution of ``H_prev`` with ``params.dcn_w``.

    For output pixel p and tap q the input is sampled bilinearly at
    ``p + grid(q) + delta(q, p)``, scaled by ``m(q, p)``, then contracted
    with the kernel.  Samples outside the map read zero.
    """
    H_prev = np.asarray(H_prev, np.float64)
    delta = np.asarray(delta, np.float64)
    m = np.asarray(m, np.float64)
    k = params.k
    _dcn_check(H_prev, delta, m, k)
    py, px = sample_positions(delta, k)
    cols = bilinear_gather(H_prev, py, px)  # [B,C,k^2,H,W]
    w = params.dcn_w.reshape(params.dcn_w.shape[0], -1, k * k)
    out = np.tensordot(w, cols * m[:, None], axes=([1, 2], [1, 2]))  # [O,B,H,W]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)) + params.dcn_b[None, :, None, None]


def dcn_align_backward(grad_out, H_prev, delta, m, params: DgtfParams):
    """Return ``(dH_prev, d_delta, d_m, d_dcn_w, d_dcn_b)``."""
    k = params.k
    g = np.asarray(grad_out, np.float64)
    py, px = sample_positions(delta, k)
    cols = bilinear_gather(H_prev, py, px)
    o, c = params.dcn_w.shape[:2]
    w = params.dcn_w.reshape(o, c, k * k)
    d_b = g.sum(axis=(0, 2, 3))
    d_w = np.tensordot(g, cols * m[:, None], axes=([0, 2, 3], [0, 3, 4])).reshape(params.dcn_w.shape)
    d_mod = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 4, 1, 2)  # [B,C,k^2,H,W]
    d_m = (d_mod * cols).sum(axis=1)
    dH, dpy, dpx = bilinear_gather_backward(d_mod * m[:, None], H_prev, py, px)
    d_delta = np.empty_like(delta)
    d_delta[:, 0::2] = dpy
    d_delta[:, 1::2] = dpx
    return dH, d_delta, d_m, d_w, d_b


# ---------------------------------------------------------------------------
# gated update
# ---------------------------------------------------------------------------

def _gates(X, A, params):
    cat1 = np.concatenate([X, A], axis=1)
    r = sigmoid(_conv_same(cat1, params.r_w, params.r_b))
    cat2 = np.concatenate([X, r * A], axis=1)
    cand = tanh(_conv_same(cat2, params.h_w, params.h_b))
    z = sigmoid(_conv_same(cat1, params.z_w, params.z_b))
    H = (1.0 - z) * X + z * cand
    return H, {"cat1": cat1, "cat2": cat2, "r": r, "cand": cand, "z": z}


def gated_update(X, H_aligned, params: DgtfParams) -> np.ndarray:
    """Reset gate, tanh candidate and update-gate blend; returns H_t."""
    X = np.asarray(X, np.float64)
    H_aligned = np.asarray(H_aligned, np.float64)
    _check_pair(X, H_aligned)
    return _gates(X, H_aligned, params)[0]


def gated_update_intermediates(X, H_aligned, params: DgtfParams) -> dict:
    """``r``, ``z`` and the candidate ``cand`` alongside ``H``."""
    H, cache = _gates(np.asarray(X, np.float64), np.asarray(H_aligned, np.float64), params)
    return {"H": H, "r": cache["r"], "z": cache["z"], "cand": cache["cand"]}


def gated_update_backward(grad_out, X, H_aligned, params: DgtfParams):
    """Return ``(dX, dH_aligned, grads)`` with ``grads`` keyed by r/z/h weight names."""
    _, cache = _gates(X, H_aligned, params)
    return _gates_backward(grad_out, X, H_aligned, params, cache)


def _gates_backward(g, X, A, params, cache):
    c = X.shape[1]
    r, z, cand = cache["r"], cache["z"], cache["cand"]
    dX = g * (1.0 - z)
    dz = g * (cand - X)
    dcand = g * z
    grads = {}
    d_cat1, grads["z_w"], grads["z_b"] = _conv_same_backward(dz * z * (1.0 - z), cache["cat1"], params.z_w)
    d_cat2, grads["h_w"], grads["h_b"] = _conv_same_backward(dcand * (1.0 - cand * cand), cache["cat2"], params.h_w)
    dX = dX + d_cat2[:, :c]
    d_rA = d_cat2[:, c:]
    dA = d_rA * r
    dr = d_rA * A
    d_cat1_r, grads["r_w"], grads["r_b"] = _conv_same_backward(dr * r * (1.0 - r), cache["cat1"], params.r_w)
    d_cat1 = d_cat1 + d_cat1_r
    return dX + d_cat1[:, :c], dA + d_cat1[:, c:], grads


# ---------------------------------------------------------------------------
# full step
# ---------------------------------------------------------------------------

@dataclass
class DgtfTrace:
    """Every intermediate of one step, kept for backward and inspection."""

    X: np.ndarray
    H_prev: np.ndarray
    delta: np.ndarray
    m: np.ndarray
    aligned: np.ndarray
    H: np.ndarray
    F: np.ndarray
    gates: dict


def dgtf_forward(X, H_prev, params: DgtfParams) -> DgtfTrace:
    X = np.asarray(X, np.float64)
    H_prev = np.asarray(H_prev, np.float64)
    _check_pair(X, H_prev)
    if X.shape[1] != params.channels:
        raise ShapeError(f"channel axis: features have C={X.shape[1]}, params expect {params.channels}")
    delta, m = predict_offsets(X, H_prev, params)
    aligned = dcn_align(H_prev, delta, m, params)
    H, cache = _gates(X, aligned, params)
    F = _conv_same(H, params.out_w, params.out_b)
    return DgtfTrace(X, H_prev, delta, m, aligned, H, F, cache)


def dgtf_backward(trace: DgtfTrace, params: DgtfParams, dF, dH=None) -> dict[str, np.ndarray]:
    """Gradients w.r.t. ``X``, ``H_prev`` and every parameter tensor.

    ``dH`` optionally adds an upstream gradient on the carried hidden state.
    """
    grads = {}
    d_H, grads["out_w"], grads["out_b"] = _conv_same_backward(dF, trace.H, params.out_w)
    if dH is not None:
        d_H = d_H + dH
    dX, d_al, gate_grads = _gates_backward(d_H, trace.X, trace.aligned, params, trace.gates)
    grads.update(gate_grads)
    dHp, d_delta, d_m, grads["dcn_w"], grads["dcn_b"] = dcn_align_backward(
        d_al, trace.H_prev, trace.delta, trace.m, params)
    dX2, dHp2, grads["offset_w"], grads["offset_b"] = predict_offsets_backward(
        d_delta, d_m, trace.X, trace.H_prev, params, trace.m)
    grads["X"] = dX + dX2
    grads["H_prev"] = dHp + dHp2
    return grads


def dgtf_step(X, state: DgtfState, params: DgtfParams):
    """One recurrent step; returns ``(F_RC, new_state)``.

    An uninitialised state bootstraps with ``H_prev := X``.
    """
    X = np.asarray(X, np.float64)
    if state.initialized:
        if state.H.shape != X.shape:
            raise ShapeError(f"hidden state shape {state.H.shape} drifted from input {X.shape}")
        H_prev = state.H
    else:
        H_prev = X
    trace = dgtf_forward(X, H_prev, params)
    return trace.F, DgtfState(trace.H, True)


def run_sequence(frames, gap: int, params: DgtfParams) -> list[np.ndarray]:
    """Run the cell over ``frames`` pairing frame t with the state from t-gap.

    ``gap`` > 1 yields ``gap`` interleaved independent recurrences; each
    stream bootstraps on its first frame.
    """
    if gap not in (1, 2, 3):
        raise ValueError(f"gap must be 1, 2 or 3, got {gap}")
    states: list[DgtfState] = []
    outputs = []
    for t, X in enumerate(frames):
        state = states[t - gap] if t >= gap else DgtfState()
        F, new_state = dgtf_step(X, state, params)
        outputs.append(F)
        states.append(new_state)
    return outputs
