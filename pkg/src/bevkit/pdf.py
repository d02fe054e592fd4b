"""Depth supervision losses: probabilistic KL, metric SmoothL1 and ordinal ranking.

The predicted quantity is a per-pixel categorical distribution ``P`` over
``D`` uniform depth bins.  Three supervisions act on it:

* a KL term pulling ``P`` toward a Gaussian around sparse LiDAR depth,
* SmoothL1 terms on the expected depth against sparse and dense targets,
* a pairwise ranking term on pixel pairs whose dense depths differ by more
  than a depth-dependent tolerance, sampled across instance boundaries and
  over the background.

Every loss has a ``*_backward`` companion returning ``dL/dP``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .rng import SplitMix64
from .tensor import ShapeError, sigmoid, softplus

PROB_FLOOR = 1e-12
TARGET_FLOOR = 1e-12


class EmptySupervisionWarning(UserWarning):
    """A loss was averaged over an empty pixel set and returned zero."""


def _from_dict(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown fields {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class DepthBinSpec:
    d_min: float = 1.0
    d_max: float = 70.0
    D: int = 70

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.D < 2:
            raise ValueError(f"need D >= 2, got {self.D}")

    @property
    def width(self) -> float:
        return (self.d_max - self.d_min) / self.D

    @property
    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.D) + 0.5) * self.width

    @classmethod
    def from_dict(cls, data: dict) -> "DepthBinSpec":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class RankingConfig:
    tau_abs: float = 0.5
    tau_rel: float = 0.03
    w_edge: float = 0.6
    w_global: float = 0.4
    n_edge_pairs: int = 512
    n_global_pairs: int = 512
    dilation_radius: int = 2
    rng_seed: int = 42

    def __post_init__(self):
        if not self.tau_abs > 0:
            raise ValueError("tau_abs must be > 0")
        if not 0 <= self.tau_rel < 1:
            raise ValueError("tau_rel must lie in [0, 1)")
        if not self.w_edge + self.w_global > 0:
            raise ValueError("w_edge + w_global must be > 0")
        if self.dilation_radius < 1:
            raise ValueError("dilation_radius must be >= 1")
        if self.n_edge_pairs < 0 or self.n_global_pairs < 0:
            raise ValueError("pair counts must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "RankingConfig":
        return _from_dict(cls, data)


@dataclass(frozen=True)
class DepthLossWeights:
    """Loss weights; the weight on the foundation term is fixed to 1."""

    lambda1: float = 0.1
    lambda_abs: float = 0.01
    lambda_dense: float = 0.03
    lambda3: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "DepthLossWeights":
        return _from_dict(cls, data)

    @classmethod
    def setting(cls, name: str) -> "DepthLossWeights":
        """Published ablation settings; a dropped term has weight 0."""
        return cls(*ABLATION_SETTINGS[name])


ABLATION_SETTINGS = {
    "A": (0.1, 0.01, 0.0, 0.0),
    "B": (0.1, 0.01, 0.03, 0.0),
    "C": (0.1, 0.01, 0.03, 0.05),
    "C1": (0.05, 0.01, 0.03, 0.05),
    "C2": (0.1, 0.01, 0.03, 0.02),
    "C3": (0.1, 0.01, 0.05, 0.05),
    "C4": (0.1, 0.03, 0.03, 0.05),
    "C5": (0.1, 0.01, 0.03, 0.05),
}


@dataclass
class DepthSupervisionBatch:
    P: np.ndarray  # [B,D,H,W]
    d_sparse: np.ndarray  # [B,H,W]
    mask_sparse: np.ndarray  # [B,H,W] in {0,1}
    d_dense: np.ndarray  # [B,H,W]
    mask_dense: np.ndarray  # [B,H,W] in {0,1}
    instance_masks: np.ndarray  # [B,K,H,W] in {0,1}; K may be 0

    def validate(self, bins: DepthBinSpec) -> None:
        b, d, h, w = self.P.shape
        if d != bins.D:
            raise ShapeError(f"depth-bin axis: P has D={d}, bins define D={bins.D}")
        for name in ("d_sparse", "mask_sparse", "d_dense", "mask_dense"):
            if getattr(self, name).shape != (b, h, w):
                raise ShapeError(f"{name}: expected {(b, h, w)}, got {getattr(self, name).shape}")
        im = self.instance_masks
        if im.ndim != 4 or im.shape[0] != b or im.shape[2:] != (h, w):
            raise ShapeError(f"instance_masks: expected (B={b}, K, {h}, {w}), got {im.shape}")
        if np.any(self.P < 0) or np.any(np.abs(self.P.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("P must be a nonnegative distribution over the depth axis")
        for name, depth in (("mask_sparse", self.d_sparse), ("mask_dense", self.d_dense)):
            m = getattr(self, name) > 0.5
            if np.any(depth[m] < bins.d_min) or np.any(depth[m] > bins.d_max):
                raise ValueError(f"depths under {name} leave [{bins.d_min}, {bins.d_max}]")

    def with_prediction(self, P: np.ndarray) -> "DepthSupervisionBatch":
        return DepthSupervisionBatch(
            np.asarray(P, np.float64), self.d_sparse, self.mask_sparse,
            self.d_dense, self.mask_dense, self.instance_masks,
        )


# ---------------------------------------------------------------------------
# probabilistic supervision
# ---------------------------------------------------------------------------

def gaussian_targets(d, bins: DepthBinSpec, sigma: float | None = None) -> np.ndarray:
    """Vectorised :func:`gaussian_target`; returns ``d.shape + (D,)``."""
    sigma = bins.width if sigma is None else sigma
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    d = np.asarray(d, np.float64)
    if np.any(d < bins.d_min) or np.any(d > bins.d_max):
        raise ValueError(f"depth outside [{bins.d_min}, {bins.d_max}]; mask it out first")
    g = np.exp(-((bins.centers - d[..., None]) ** 2) / (2.0 * sigma * sigma))
    g = np.maximum(g, TARGET_FLOOR)
    return g / g.sum(axis=-1, keepdims=True)


def gaussian_target(d: float, bins: DepthBinSpec, sigma: float | None = None) -> np.ndarray:
    """Discretised Gaussian around depth ``d`` over the bin centres, summing to 1."""
    return gaussian_targets(np.float64(d), bins, sigma)


def _pixels(P: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # [n, D] distributions at masked pixels, row-major pixel order
    return P.transpose(0, 2, 3, 1)[mask]


def _kl(batch, bins, sigma):
    mask = batch.mask_sparse > 0.5
    n = int(mask.sum())
    if n == 0:
        return 0.0, None, mask, n
    g = gaussian_targets(batch.d_sparse[mask], bins, sigma)
    p = np.maximum(_pixels(batch.P, mask), PROB_FLOOR)
    loss = float((g * (np.log(g) - np.log(p))).sum() / n)
    return loss, g, mask, n


def kl_prob_loss(batch: DepthSupervisionBatch, bins: DepthBinSpec, sigma: float | None = None) -> float:
    """Mean KL(Gaussian target || P) over the sparse mask.

    An empty sparse mask returns 0.0 and emits :class:`EmptySupervisionWarning`.
    """
    loss, _, _, n = _kl(batch, bins, sigma)
    if n == 0:
        warnings.warn("empty sparse mask: probabilistic loss is 0", EmptySupervisionWarning)
    return loss


def kl_prob_loss_backward(batch, bins, sigma=None) -> np.ndarray:
    _, g, mask, n = _kl(batch, bins, sigma)
    dP = np.zeros_like(batch.P)
    if n == 0:
        return dP
    p = _pixels(batch.P, mask)
    dp = np.where(p > PROB_FLOOR, -g / np.maximum(p, PROB_FLOOR), 0.0) / n
    view = dP.transpose(0, 2, 3, 1)
    view[mask] = dp
    return dP


# ---------------------------------------------------------------------------
# metric supervision
# ---------------------------------------------------------------------------

def expected_depth(P, bins: DepthBinSpec) -> np.ndarray:
    """[B,D,H,W] -> [B,H,W] mean depth under the bin centres."""
    P = np.asarray(P, np.float64)
    if P.ndim != 4 or P.shape[1] != bins.D:
        raise ShapeError(f"P must be [B,{bins.D},H,W], got {P.shape}")
    return np.tensordot(bins.centers, P, axes=([0], [1]))


def expected_depth_backward(grad_out, bins: DepthBinSpec) -> np.ndarray:
    g = np.asarray(grad_out, np.float64)
    return g[:, None, :, :] * bins.centers[None, :, None, None]


def smooth_l1(x, beta: float = 1.0):
    """Huber-style penalty: 0.5 x^2/beta inside |x| < beta, |x| - beta/2 outside."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    x = np.asarray(x, np.float64)
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def smooth_l1_grad(x, beta: float = 1.0):
    x = np.asarray(x, np.float64)
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def _masked_smooth_l1(dhat, target, mask, beta):
    m = mask > 0.5
    n = int(m.sum())
    if n == 0:
        return 0.0, np.zeros_like(dhat)
    r = dhat - target
    loss = float(smooth_l1(r[m], beta).sum() / n)
    grad = np.where(m, smooth_l1_grad(r, beta), 0.0) / n
    return loss, grad


def foundation_loss(batch, bins, beta: float = 1.0, lambda_abs: float = 0.01,
                    lambda_dense: float = 0.03) -> tuple[float, float, float]:
    """Return ``(L_found, L_abs, L_dense)``.

    ``L_abs``/``L_dense`` are SmoothL1 means of the expected depth against
    the sparse/dense targets over their masks.
    """
    dhat = expected_depth(batch.P, bins)
    l_abs, _ = _masked_smooth_l1(dhat, batch.d_sparse, batch.mask_sparse, beta)
    l_dense, _ = _masked_smooth_l1(dhat, batch.d_dense, batch.mask_dense, beta)
    if not (batch.mask_sparse > 0.5).any() and not (batch.mask_dense > 0.5).any():
        warnings.warn("both depth masks empty: foundation loss is 0", EmptySupervisionWarning)
    return lambda_abs * l_abs + lambda_dense * l_dense, l_abs, l_dense


def foundation_loss_backward(batch, bins, beta=1.0, lambda_abs=0.01, lambda_dense=0.03) -> np.ndarray:
    dhat = expected_depth(batch.P, bins)
    _, g_abs = _masked_smooth_l1(dhat, batch.d_sparse, batch.mask_sparse, beta)
    _, g_dense = _masked_smooth_l1(dhat, batch.d_dense, batch.mask_dense, beta)
    return expected_depth_backward(lambda_abs * g_abs + lambda_dense * g_dense, bins)


# ---------------------------------------------------------------------------
# structural ranking supervision
# ---------------------------------------------------------------------------

def dynamic_threshold(d_i, d_j, cfg: RankingConfig):
    """Return ``(tau, include)``; include iff |d_i - d_j| > max(tau_abs, tau_rel * mean)."""
    d_i = np.asarray(d_i, np.float64)
    d_j = np.asarray(d_j, np.float64)
    tau = np.maximum(cfg.tau_abs, cfg.tau_rel * (d_i + d_j) / 2.0)
    include = np.abs(d_i - d_j) > tau
    if tau.ndim == 0:
        return float(tau), bool(include)
    return tau, include


def pair_rank_loss(dhat_i, dhat_j, d_gi, d_gj):
    """softplus(-sign(d_gi - d_gj) * (dhat_i - dhat_j))."""
    s = np.sign(np.asarray(d_gi, np.float64) - np.asarray(d_gj, np.float64))
    return softplus(-s * (np.asarray(dhat_i, np.float64) - np.asarray(dhat_j, np.float64)))


def pair_rank_loss_grad(dhat_i, dhat_j, d_gi, d_gj):
    """Return ``(dL/d dhat_i, dL/d dhat_j)``."""
    s = np.sign(np.asarray(d_gi, np.float64) - np.asarray(d_gj, np.float64))
    sg = sigmoid(-s * (np.asarray(dhat_i, np.float64) - np.asarray(dhat_j, np.float64)))
    return -s * sg, s * sg


def dilated_ring(mask, radius: int) -> np.ndarray:
    """Square-element dilation of a binary [H,W] mask minus the mask itself (bool)."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    m = np.asarray(mask) > 0.5
    grown = ndimage.binary_dilation(m, structure=np.ones((2 * radius + 1,) * 2, dtype=bool))
    return grown & ~m


class RankingPairs(NamedTuple):
    """Pixel pairs as flat indices into the [B,H,W] grid, each shaped (n, 2)."""

    edge: np.ndarray
    global_: np.ndarray


def _empty_pairs() -> np.ndarray:
    return np.zeros((0, 2), dtype=np.int64)


def _draw_from_groups(groups, n_pairs, rng, d_flat, cfg):
    """Rejection-sample ``n_pairs`` from ``groups`` of (i_pool, j_pool).

    All ``20 * n_pairs`` attempts are drawn up front and the first accepted
    ``n_pairs`` kept, which matches sequential rejection sampling.
    """
    if not groups or n_pairs == 0:
        return _empty_pairs()
    attempts = 20 * n_pairs
    u = rng.uniform(3 * attempts).reshape(attempts, 3)
    which = np.minimum((u[:, 0] * len(groups)).astype(np.int64), len(groups) - 1)
    i = np.empty(attempts, dtype=np.int64)
    j = np.empty(attempts, dtype=np.int64)
    for g, (pool_i, pool_j) in enumerate(groups):
        sel = which == g
        if not sel.any():
            continue
        ki = np.minimum((u[sel, 1] * pool_i.size).astype(np.int64), pool_i.size - 1)
        kj = np.minimum((u[sel, 2] * pool_j.size).astype(np.int64), pool_j.size - 1)
        i[sel] = pool_i[ki]
        j[sel] = pool_j[kj]
    _, include = dynamic_threshold(d_flat[i], d_flat[j], cfg)
    keep = np.flatnonzero(include)[:n_pairs]
    return np.stack([i[keep], j[keep]], axis=1)


def sample_edge_pairs(batch: DepthSupervisionBatch, cfg: RankingConfig, rng: SplitMix64) -> np.ndarray:
    """Cross-boundary pairs: i in an instance's dilated ring, j in its interior.

    The instance is picked uniformly among those with non-empty ring and
    interior (both restricted to the dense mask).
    """
    b_, k_, h, w = batch.instance_masks.shape
    dense = batch.mask_dense > 0.5
    inst = batch.instance_masks > 0.5
    groups = []
    for b in range(b_):
        base = b * h * w
        for k in range(k_):
            m = inst[b, k]
            if not m.any():
                continue
            ring = np.flatnonzero(dilated_ring(m, cfg.dilation_radius) & dense[b])
            interior = np.flatnonzero(m & dense[b])
            if ring.size and interior.size:
                groups.append((ring + base, interior + base))
    return _draw_from_groups(groups, cfg.n_edge_pairs, rng, batch.d_dense.ravel(), cfg)


def background_mask(batch: DepthSupervisionBatch) -> np.ndarray:
    """[B,H,W] bool: dense-supervised pixels outside every instance mask."""
    fg = (batch.instance_masks > 0.5).any(axis=1)
    return (batch.mask_dense > 0.5) & ~fg


def sample_global_pairs(batch: DepthSupervisionBatch, cfg: RankingConfig, rng: SplitMix64) -> np.ndarray:
    """Background pairs: both pixels uniform over the same image's background."""
    bg = background_mask(batch)
    hw = bg.shape[1] * bg.shape[2]
    groups = []
    for b in range(bg.shape[0]):
        pool = np.flatnonzero(bg[b])
        if pool.size:
            groups.append((pool + b * hw, pool + b * hw))
    return _draw_from_groups(groups, cfg.n_global_pairs, rng, batch.d_dense.ravel(), cfg)


def sample_pairs(batch, cfg: RankingConfig, rng: SplitMix64 | None = None) -> RankingPairs:
    rng = SplitMix64(cfg.rng_seed) if rng is None else rng
    edge = sample_edge_pairs(batch, cfg, rng)
    return RankingPairs(edge, sample_global_pairs(batch, cfg, rng))


def _pairs_mean(dhat_flat, d_flat, pairs):
    if pairs.shape[0] == 0:
        return 0.0
    i, j = pairs[:, 0], pairs[:, 1]
    return float(pair_rank_loss(dhat_flat[i], dhat_flat[j], d_flat[i], d_flat[j]).mean())


def relative_loss(batch, bins, cfg: RankingConfig, rng: SplitMix64 | None = None,
                  pairs: RankingPairs | None = None) -> tuple[float, float, float]:
    """Return ``(L_relative, L_edge, L_global)``; empty pair sets contribute 0."""
    pairs = sample_pairs(batch, cfg, rng) if pairs is None else pairs
    dhat = expected_depth(batch.P, bins).ravel()
    d = batch.d_dense.ravel()
    l_edge = _pairs_mean(dhat, d, pairs.edge)
    l_global = _pairs_mean(dhat, d, pairs.global_)
    return cfg.w_edge * l_edge + cfg.w_global * l_global, l_edge, l_global


def relative_loss_backward(batch, bins, cfg: RankingConfig, pairs: RankingPairs) -> np.ndarray:
    dhat = expected_depth(batch.P, bins)
    d = batch.d_dense.ravel()
    g = np.zeros(dhat.size)
    for weight, pp in ((cfg.w_edge, pairs.edge), (cfg.w_global, pairs.global_)):
        if pp.shape[0] == 0:
            continue
        i, j = pp[:, 0], pp[:, 1]
        gi, gj = pair_rank_loss_grad(dhat.ravel()[i], dhat.ravel()[j], d[i], d[j])
        scale = weight / pp.shape[0]
        g += np.bincount(i, weights=gi * scale, minlength=g.size)
        g += np.bincount(j, weights=gj * scale, minlength=g.size)
    return expected_depth_backward(g.reshape(dhat.shape), bins)


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------

@dataclass
class DepthLossReport:
    l_prob: float
    l_abs: float
    l_dense: float
    l_found: float
    l_edge: float
    l_global: float
    l_relative: float
    l_depth: float
    pairs: RankingPairs
    flags: tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_edge_pairs_used(self) -> int:
        return int(self.pairs.edge.shape[0])

    @property
    def n_global_pairs_used(self) -> int:
        return int(self.pairs.global_.shape[0])

    def to_json(self) -> dict:
        return {
            "l_prob": self.l_prob,
            "l_abs": self.l_abs,
            "l_dense": self.l_dense,
            "l_edge": self.l_edge,
            "l_global": self.l_global,
            "l_relative": self.l_relative,
            "l_depth": self.l_depth,
            "n_edge_pairs_used": self.n_edge_pairs_used,
            "n_global_pairs_used": self.n_global_pairs_used,
        }


def total_depth_loss(batch, bins, cfg: RankingConfig | None = None,
                     weights: DepthLossWeights | None = None, sigma: float | None = None,
                     beta: float = 1.0, rng: SplitMix64 | None = None,
                     pairs: RankingPairs | None = None) -> DepthLossReport:
    """lambda1 * L_prob + L_found + lambda3 * L_relative, with every sub-term reported.

    ``L_found`` already carries ``lambda_abs``/``lambda_dense``.  Pairs are
    sampled once (from ``rng`` or ``cfg.rng_seed``) and kept on the report
    so :func:`total_depth_loss_backward` can reuse them.
    """
    cfg = RankingConfig() if cfg is None else cfg
    weights = DepthLossWeights() if weights is None else weights
    flags = []
    if not (batch.mask_sparse > 0.5).any():
        flags.append("empty-sparse")
    if not (batch.mask_dense > 0.5).any():
        flags.append("empty-dense")
    l_prob = _kl(batch, bins, sigma)[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptySupervisionWarning)
        l_found, l_abs, l_dense = foundation_loss(batch, bins, beta, weights.lambda_abs, weights.lambda_dense)
    pairs = sample_pairs(batch, cfg, rng) if pairs is None else pairs
    l_rel, l_edge, l_global = relative_loss(batch, bins, cfg, pairs=pairs)
    if pairs.edge.shape[0] == 0:
        flags.append("no-edge-pairs")
    if pairs.global_.shape[0] == 0:
        flags.append("no-global-pairs")
    total = weights.lambda1 * l_prob + l_found + weights.lambda3 * l_rel
    return DepthLossReport(l_prob, l_abs, l_dense, l_found, l_edge, l_global, l_rel,
                           float(total), pairs, tuple(flags))


def total_depth_loss_backward(batch, bins, cfg: RankingConfig, weights: DepthLossWeights,
                              pairs: RankingPairs, sigma: float | None = None,
                              beta: float = 1.0) -> np.ndarray:
    dP = weights.lambda1 * kl_prob_loss_backward(batch, bins, sigma)
    dP += foundation_loss_backward(batch, bins, beta, weights.lambda_abs, weights.lambda_dense)
    dP += weights.lambda3 * relative_loss_backward(batch, bins, cfg, pairs)
    return dP
