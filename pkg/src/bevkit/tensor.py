"""Dense float64 kernels with explicit vector-Jacobian products.

Tensors are plain row-major ``numpy.ndarray`` objects.  Every forward
operator here has a matching ``*_backward`` function that takes the upstream
gradient (same shape as the forward output) and returns gradients for the
differentiable inputs.  There is no tape; callers chain backward passes by
hand.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_RANK = 5
DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operator."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a contiguous float64 array satisfying the tensor invariants."""
    a = np.ascontiguousarray(x, dtype=DTYPE)
    if a.ndim > MAX_RANK:
        raise ShapeError(f"{name}: rank {a.ndim} exceeds {MAX_RANK}")
    if any(e < 1 for e in a.shape):
        raise ShapeError(f"{name}: zero extent in shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: non-finite values")
    return a


def _expect_rank(a: np.ndarray, rank: int, name: str, axes: str) -> None:
    if a.ndim != rank:
        raise ShapeError(f"{name} must be rank {rank} [{axes}], got shape {a.shape}")


def _pair(p) -> tuple[int, int]:
    if isinstance(p, (int, np.integer)):
        p = (int(p), int(p))
    ph, pw = (int(v) for v in p)
    if ph < 0 or pw < 0:
        raise ValueError(f"padding must be >= 0, got {(ph, pw)}")
    return ph, pw


def same_padding(kernel: np.ndarray) -> tuple[int, int]:
    """Padding that keeps spatial extent for an odd stride-1 kernel."""
    kh, kw = kernel.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"same padding needs odd kernel extents, got {kh}x{kw}")
    return kh // 2, kw // 2


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_check(x, w, b):
    _expect_rank(x, 4, "input", "B,C,H,W")
    _expect_rank(w, 4, "kernel", "O,C,kh,kw")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"channel axis mismatch: input has C={x.shape[1]}, kernel expects C={w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias axis mismatch: expected ({w.shape[0]},), got {b.shape}")


def _windows(x, kh, kw, ph, pw):
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = xp.shape[2] - kh + 1
    wo = xp.shape[3] - kw + 1
    if ho < 1:
        raise ShapeError(f"height axis: kernel {kh} larger than padded input {xp.shape[2]}")
    if wo < 1:
        raise ShapeError(f"width axis: kernel {kw} larger than padded input {xp.shape[3]}")
    # [B, C, H', W', kh, kw]
    return xp, sliding_window_view(xp, (kh, kw), axis=(2, 3))


def conv2d(x, w, b=None, padding=0) -> np.ndarray:
    """Stride-1 zero-padded cross-correlation.

    ``x`` is [B,C,H,W], ``w`` is [O,C,kh,kw], ``b`` is [O] or None.
    Output is [B,O,H+2*ph-kh+1,W+2*pw-kw+1].
    """
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    b = None if b is None else np.asarray(b, dtype=DTYPE)
    _conv_check(x, w, b)
    ph, pw = _pair(padding)
    kh, kw = w.shape[2:]
    _, win = _windows(x, kh, kw, ph, pw)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [B,H',W',O]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv2d_backward(grad_out, x, w, padding=0):
    """Return ``(d_input, d_kernel, d_bias)`` for :func:`conv2d`."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    g = np.asarray(grad_out, dtype=DTYPE)
    _conv_check(x, w, None)
    ph, pw = _pair(padding)
    kh, kw = w.shape[2:]
    xp, win = _windows(x, kh, kw, ph, pw)
    ho, wo = win.shape[2:4]
    expected = (x.shape[0], w.shape[0], ho, wo)
    if g.shape != expected:
        raise ShapeError(f"upstream gradient shape {g.shape} != conv2d output {expected}")
    dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [O,C,kh,kw]
    db = g.sum(axis=(0, 2, 3))
    dxp = np.zeros(xp.shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))  # [B,H',W',C]
            dxp[:, :, i:i + ho, j:j + wo] += contrib.transpose(0, 3, 1, 2)
    dx = dxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# bilinear sampling (zero padding outside the grid)
# ---------------------------------------------------------------------------

def _corners(py, px, h, w):
    """Yield ``(flat_index, valid, weight, d_weight/dy, d_weight/dx)`` per corner."""
    y0f = np.floor(py)
    x0f = np.floor(px)
    ly = py - y0f
    lx = px - x0f
    hy = 1.0 - ly
    hx = 1.0 - lx
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    table = (
        (0, 0, hy * hx, -hx, -hy),
        (0, 1, hy * lx, -lx, hy),
        (1, 0, ly * hx, hx, -ly),
        (1, 1, ly * lx, lx, ly),
    )
    for oy, ox, wgt, wy, wx in table:
        yy = y0 + oy
        xx = x0 + ox
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0)
        yield idx, valid, wgt, wy, wx


def bilinear_gather(feature, py, px) -> np.ndarray:
    """Sample ``feature`` [B,C,H,W] at per-batch positions ``py``/``px`` [B,...].

    Returns [B,C,...].  Neighbours outside the grid contribute zero.
    """
    feature = np.asarray(feature, dtype=DTYPE)
    py = np.asarray(py, dtype=DTYPE)
    px = np.asarray(px, dtype=DTYPE)
    _expect_rank(feature, 4, "feature", "B,C,H,W")
    if py.shape != px.shape or py.shape[0] != feature.shape[0]:
        raise ShapeError(f"coordinate shapes {py.shape}/{px.shape} do not match batch {feature.shape[0]}")
    b_, c, h, w = feature.shape
    flat = feature.reshape(b_, c, h * w)
    n = int(np.prod(py.shape[1:], dtype=np.int64))
    out = np.zeros((b_, c, n), dtype=DTYPE)
    for b in range(b_):
        for idx, valid, wgt, _, _ in _corners(py[b].ravel(), px[b].ravel(), h, w):
            out[b] += flat[b][:, idx] * np.where(valid, wgt, 0.0)
    return out.reshape((b_, c) + py.shape[1:])


def bilinear_gather_backward(grad_out, feature, py, px):
    """Return ``(d_feature, d_py, d_px)`` for :func:`bilinear_gather`.

    The derivative with respect to a coordinate is the one-sided (right)
    slope when the coordinate sits exactly on a grid line.
    """
    feature = np.asarray(feature, dtype=DTYPE)
    py = np.asarray(py, dtype=DTYPE)
    px = np.asarray(px, dtype=DTYPE)
    b_, c, h, w = feature.shape
    g = np.asarray(grad_out, dtype=DTYPE)
    if g.shape != (b_, c) + py.shape[1:]:
        raise ShapeError(f"upstream gradient shape {g.shape} != sample shape {(b_, c) + py.shape[1:]}")
    flat = feature.reshape(b_, c, h * w)
    n = int(np.prod(py.shape[1:], dtype=np.int64))
    g = g.reshape(b_, c, n)
    dfeat = np.zeros((b_, c * h * w), dtype=DTYPE)
    dpy = np.zeros((b_, n), dtype=DTYPE)
    dpx = np.zeros((b_, n), dtype=DTYPE)
    chan_base = (np.arange(c) * (h * w))[:, None]
    for b in range(b_):
        for idx, valid, wgt, wy, wx in _corners(py[b].ravel(), px[b].ravel(), h, w):
            v = flat[b][:, idx] * valid
            gv = (g[b] * v).sum(axis=0)
            dpy[b] += gv * wy
            dpx[b] += gv * wx
            contrib = g[b] * np.where(valid, wgt, 0.0)
            dfeat[b] += np.bincount(
                (chan_base + idx[None, :]).ravel(),
                weights=contrib.ravel(),
                minlength=c * h * w,
            )
    return (
        dfeat.reshape(feature.shape),
        dpy.reshape(py.shape),
        dpx.reshape(px.shape),
    )


def bilinear_sample(feature, y: float, x: float) -> np.ndarray:
    """Bilinearly interpolate a [C,H,W] map at ``(y, x)``; returns [C]."""
    feature = np.asarray(feature, dtype=DTYPE)
    _expect_rank(feature, 3, "feature", "C,H,W")
    out = bilinear_gather(feature[None], np.array([[y]], DTYPE), np.array([[x]], DTYPE))
    return out[0, :, 0]


def bilinear_sample_backward(grad_out, feature, y: float, x: float):
    """Return ``(d_feature, d_y, d_x)`` for :func:`bilinear_sample`."""
    feature = np.asarray(feature, dtype=DTYPE)
    g = np.asarray(grad_out, dtype=DTYPE).reshape(1, -1, 1)
    dfeat, dy, dx = bilinear_gather_backward(
        g, feature[None], np.array([[y]], DTYPE), np.array([[x]], DTYPE)
    )
    return dfeat[0], float(dy[0, 0]), float(dx[0, 0])


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(grad_out, y):
    """Gradient of sigmoid given its output ``y``."""
    return np.asarray(grad_out) * y * (1.0 - y)


def tanh(x) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=DTYPE))


def tanh_backward(grad_out, y):
    """Gradient of tanh given its output ``y``."""
    return np.asarray(grad_out) * (1.0 - y * y)


def softplus(x) -> np.ndarray:
    """ln(1 + e^x) without overflow; above 30 uses x + ln(1 + e^-x)."""
    x = np.asarray(x, dtype=DTYPE)
    big = x > 30.0
    return np.where(
        big,
        x + np.log1p(np.exp(-np.abs(x))),
        np.log1p(np.exp(np.minimum(x, 30.0))),
    )


def softplus_backward(grad_out, x):
    return np.asarray(grad_out) * sigmoid(x)


def exp(x) -> np.ndarray:
    return np.exp(np.asarray(x, dtype=DTYPE))


def exp_backward(grad_out, y):
    return np.asarray(grad_out) * y


def log(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if np.any(x <= 0):
        raise ValueError("log of non-positive input")
    return np.log(x)


def log_backward(grad_out, x):
    return np.asarray(grad_out) / np.asarray(x, dtype=DTYPE)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a, DTYPE), np.asarray(b, DTYPE)
    _same_shape(a, b, "add")
    return a + b


def add_backward(grad_out):
    return grad_out, grad_out


def sub(a, b) -> np.ndarray:
    a, b = np.asarray(a, DTYPE), np.asarray(b, DTYPE)
    _same_shape(a, b, "sub")
    return a - b


def sub_backward(grad_out):
    return grad_out, -np.asarray(grad_out)


def mul(a, b) -> np.ndarray:
    """Hadamard product."""
    a, b = np.asarray(a, DTYPE), np.asarray(b, DTYPE)
    _same_shape(a, b, "mul")
    return a * b


def mul_backward(grad_out, a, b):
    g = np.asarray(grad_out)
    return g * b, g * a


def scale(a, s: float) -> np.ndarray:
    return np.asarray(a, DTYPE) * s


def scale_backward(grad_out, s: float):
    return np.asarray(grad_out) * s


def shift(a, s: float) -> np.ndarray:
    return np.asarray(a, DTYPE) + s


def shift_backward(grad_out):
    return grad_out


# ---------------------------------------------------------------------------
# reductions and products
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along ``axis``: exp((x - max)/t) normalised."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(x, dtype=DTYPE) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out, y, axis: int = -1, temperature: float = 1.0):
    """Gradient of :func:`softmax` given its output ``y``."""
    g = np.asarray(grad_out, dtype=DTYPE)
    _same_shape(g, y, "softmax_backward")
    return y * (g - (g * y).sum(axis=axis, keepdims=True)) / temperature


def batched_matmul(a, b) -> np.ndarray:
    """[B,P,Q] @ [B,Q,R] -> [B,P,R]."""
    a, b = np.asarray(a, DTYPE), np.asarray(b, DTYPE)
    _expect_rank(a, 3, "a", "B,P,Q")
    _expect_rank(b, 3, "b", "B,Q,R")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"batch axis mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2] != b.shape[1]:
        raise ShapeError(f"inner axis mismatch: a has Q={a.shape[2]}, b has Q={b.shape[1]}")
    return np.matmul(a, b)


def batched_matmul_backward(grad_out, a, b):
    g = np.asarray(grad_out, DTYPE)
    if g.shape != (a.shape[0], a.shape[1], b.shape[2]):
        raise ShapeError(f"upstream gradient shape {g.shape} does not match product")
    return np.matmul(g, b.transpose(0, 2, 1)), np.matmul(a.transpose(0, 2, 1), g)


def global_avg_pool(x) -> np.ndarray:
    """[N,C,H,W] -> [N,C] spatial mean."""
    x = np.asarray(x, DTYPE)
    _expect_rank(x, 4, "input", "N,C,H,W")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out, input_shape):
    n, c, h, w = input_shape
    g = np.asarray(grad_out, DTYPE)
    if g.shape != (n, c):
        raise ShapeError(f"upstream gradient shape {g.shape} != ({n}, {c})")
    return np.broadcast_to(g[:, :, None, None] / (h * w), input_shape).copy()
