"""Temporal alignment demo on synthetic moving BEV features.

``oracle`` injects offsets equal to the negated true shift and measures how
well deformable alignment of frame t-1 reproduces the plain convolution of
frame t.  ``trained`` fits the fusion cell by gradient descent so that its
output on noisy frames matches the clean current frame.
"""

from __future__ import annotations

import time

import numpy as np

from .. import dgtf
from ..rng import SplitMix64, derive_seed
from ..synth import MotionSpec, make_moving_bev
from .report import CheckReport

ORACLE_TOL = 1e-8
TRAINED_RATIO = 0.5
DIVERGENCE_RATIO = 10.0


def interior(x: np.ndarray, band: int) -> np.ndarray:
    return x[..., band:x.shape[-2] - band, band:x.shape[-1] - band]


def _band(spec: MotionSpec, k: int) -> int:
    return k // 2 + max(abs(spec.shift[0]), abs(spec.shift[1]))


def oracle_offsets(shift, k: int, shape) -> tuple[np.ndarray, np.ndarray]:
    """Offsets ``-shift`` on every tap and a unit mask, for a [B,C,H,W] map."""
    b_, _, h, w = shape
    kk = k * k
    delta = np.empty((b_, 2 * kk, h, w))
    delta[:, 0::2] = -shift[0]
    delta[:, 1::2] = -shift[1]
    return delta, np.ones((b_, kk, h, w))


def demo_oracle(spec: MotionSpec, seed: int = 42, params: dgtf.DgtfParams | None = None) -> CheckReport:
    """Max interior error between aligned frame t-1 and the convolved frame t.

    The reference convolution is the deformable one at zero offset and unit
    mask, which equals ``conv2d`` (checked separately) and shares its
    summation order with the aligned branch.
    """
    frames, shift = make_moving_bev(spec, clean=True)
    channels = frames[0].shape[1]
    params = dgtf.DgtfParams.init(channels, rng=SplitMix64(derive_seed(seed, "demo"))) if params is None else params
    band = _band(spec, params.k)
    report = CheckReport("demo-temporal", seed=seed, config={"mode": "oracle", "shift": list(shift),
                                                             "n_frames": spec.n_frames})
    delta, m = oracle_offsets(shift, params.k, frames[0].shape)
    zero = np.zeros_like(delta)
    errors = []
    for t in range(1, len(frames)):
        t0 = time.perf_counter()
        aligned = dgtf.dcn_align(frames[t - 1], delta, m, params)
        reference = dgtf.dcn_align(frames[t], zero, m, params)
        err = float(np.abs(interior(aligned - reference, band)).max(initial=0.0))
        errors.append(err)
        report.add(f"oracle.frame_{t}", err < ORACLE_TOL, err, ORACLE_TOL, (time.perf_counter() - t0) * 1e3)
    report.metrics = {"alignment_error": errors, "interior_band": band}
    return report


def sequence_loss(frames, clean, params: dgtf.DgtfParams, band: int, grad: bool = True):
    """Mean interior squared error of F_RC against the clean frames, and its gradient.

    The hidden state is carried across frames but treated as a constant when
    differentiating (one-step truncated backpropagation through time).
    """
    grads = {k: np.zeros_like(v) for k, v in params.tensors().items()} if grad else None
    H = frames[0]
    total = 0.0
    count = 0
    traces = []
    for X, target in zip(frames, clean):
        tr = dgtf.dgtf_forward(X, H, params)
        diff = interior(tr.F - target, band)
        total += float((diff ** 2).sum())
        count += diff.size
        traces.append(tr)
        H = tr.H
    loss = total / count
    if grad:
        for tr, target in zip(traces, clean):
            dF = np.zeros_like(tr.F)
            interior(dF, band)[...] = 2.0 * interior(tr.F - target, band) / count
            g = dgtf.dgtf_backward(tr, params, dF)
            for k in grads:
                grads[k] += g[k]
    return loss, grads


def demo_trained(spec: MotionSpec, steps: int = 500, lr: float = 1e-2, seed: int = 42,
                 params: dgtf.DgtfParams | None = None) -> CheckReport:
    """Plain gradient descent on every fusion parameter."""
    frames, shift = make_moving_bev(spec)
    clean, _ = make_moving_bev(spec, clean=True)
    channels = frames[0].shape[1]
    params = dgtf.DgtfParams.init(channels, rng=SplitMix64(derive_seed(seed, "demo"))) if params is None else params
    band = _band(spec, params.k)
    report = CheckReport("demo-temporal", seed=seed, config={
        "mode": "trained", "shift": list(shift), "steps": steps, "lr": lr, "noise_sigma": spec.noise_sigma})
    t0 = time.perf_counter()
    curve = []
    diverged = False
    for _ in range(steps):
        loss, grads = sequence_loss(frames, clean, params, band)
        curve.append(loss)
        if not np.isfinite(loss) or loss > DIVERGENCE_RATIO * curve[0]:
            diverged = True
            break
        params = params.replace(**{k: getattr(params, k) - lr * g for k, g in grads.items()})
    final = sequence_loss(frames, clean, params, band, grad=False)[0] if not diverged else curve[-1]
    curve.append(final)
    ms = (time.perf_counter() - t0) * 1e3
    ratio = final / curve[0] if curve[0] > 0 else 0.0
    if diverged:
        report.add(f"trained.diverged(lr={lr:g})", False, ratio, DIVERGENCE_RATIO, ms)
    else:
        report.add("trained.error_ratio", ratio < TRAINED_RATIO, ratio, TRAINED_RATIO, ms)
    offsets, _ = dgtf.predict_offsets(frames[-1], frames[-2], params)
    report.metrics = {
        "alignment_error": curve,
        "initial_error": curve[0],
        "final_error": final,
        "lr": lr,
        "mean_offset_dy": float(offsets[:, 0::2].mean()),
        "mean_offset_dx": float(offsets[:, 1::2].mean()),
    }
    return report


def demo_temporal(spec: MotionSpec, mode: str = "oracle", steps: int = 500, lr: float = 1e-2,
                  seed: int = 42) -> CheckReport:
    if mode == "oracle":
        return demo_oracle(spec, seed)
    if mode == "trained":
        return demo_trained(spec, steps, lr, seed)
    raise ValueError(f"mode must be oracle or trained, got {mode!r}")
