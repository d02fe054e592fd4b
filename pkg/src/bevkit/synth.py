"""Seeded synthetic scenes, moving BEV features and instance proposals."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import read_rten
from .pdf import DepthBinSpec, DepthSupervisionBatch
from .rng import SplitMix64, derive_seed


@dataclass(frozen=True)
class Plane:
    """Constant-depth background region; ``box=None`` covers the frame."""

    depth: float
    box: tuple[int, int, int, int] | None = None  # (y0, x0, y1, x1), half-open


@dataclass(frozen=True)
class SceneObject:
    box: tuple[int, int, int, int]
    depth: float
    shape: str = "rect"  # or "ellipse", inscribed in box


@dataclass
class SceneSpec:
    width: int
    height: int
    background_planes: list[Plane] = field(default_factory=list)
    objects: list[SceneObject] = field(default_factory=list)
    sparse_fraction: float = 0.1
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self, bins: DepthBinSpec) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("frame extents must be >= 1")
        if not 0 <= self.sparse_fraction <= 1:
            raise ValueError("sparse_fraction must lie in [0, 1]")
        for item in list(self.background_planes) + list(self.objects):
            if not bins.d_min <= item.depth <= bins.d_max:
                raise ValueError(f"depth {item.depth} outside [{bins.d_min}, {bins.d_max}]")
            if item.box is not None:
                y0, x0, y1, x1 = item.box
                if not (0 <= y0 < y1 <= self.height and 0 <= x0 < x1 <= self.width):
                    raise ValueError(f"region {item.box} leaves the {self.height}x{self.width} frame")
        for obj in self.objects:
            if obj.shape not in ("rect", "ellipse"):
                raise ValueError(f"unknown object shape {obj.shape!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        data["background_planes"] = [
            Plane(p["depth"], tuple(p["box"]) if p.get("box") is not None else None)
            for p in data.get("background_planes", [])
        ]
        data["objects"] = [
            SceneObject(tuple(o["box"]), o["depth"], o.get("shape", "rect")) for o in data.get("objects", [])
        ]
        return cls(**data)


def region_mask(box, shape: str, height: int, width: int) -> np.ndarray:
    y0, x0, y1, x1 = box
    m = np.zeros((height, width), dtype=bool)
    if shape == "rect":
        m[y0:y1, x0:x1] = True
        return m
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
    ry, rx = (y1 - y0) / 2.0, (x1 - x0) / 2.0
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def make_depth_scene(spec: SceneSpec, bins: DepthBinSpec | None = None) -> DepthSupervisionBatch:
    """Paint planes then objects back to front into a B=1 supervision batch.

    Pixels no plane covers sit at ``bins.d_max``.  Later objects occlude
    earlier ones and instance masks hold the visible part of each object.
    Sparse depths are dense depths plus seeded Gaussian noise, clipped to the
    bin range.  ``P`` is a uniform placeholder distribution.
    """
    bins = DepthBinSpec() if bins is None else bins
    spec.validate(bins)
    h, w = spec.height, spec.width
    dense = np.full((h, w), float(bins.d_max))
    for plane in spec.background_planes:
        if plane.box is None:
            dense[:] = plane.depth
        else:
            dense[region_mask(plane.box, "rect", h, w)] = plane.depth
    owner = np.full((h, w), -1, dtype=np.int64)
    for k, obj in enumerate(spec.objects):
        m = region_mask(obj.box, obj.shape, h, w)
        dense[m] = obj.depth
        owner[m] = k
    instances = np.stack([owner == k for k in range(len(spec.objects))]) if spec.objects else np.zeros((0, h, w), bool)

    rng = SplitMix64(spec.seed)
    n_sparse = int(np.floor(spec.sparse_fraction * h * w))
    mask_sparse = np.zeros(h * w)
    mask_sparse[rng.permutation(h * w)[:n_sparse]] = 1.0
    noise = rng.normal(h * w).reshape(h, w) * spec.noise_sigma
    sparse = np.clip(dense + noise, bins.d_min, bins.d_max)

    return DepthSupervisionBatch(
        P=np.full((1, bins.D, h, w), 1.0 / bins.D),
        d_sparse=sparse[None],
        mask_sparse=mask_sparse.reshape(1, h, w),
        d_dense=dense[None],
        mask_dense=np.ones((1, h, w)),
        instance_masks=instances[None].astype(np.float64),
    )


def stack_scenes(batches: list[DepthSupervisionBatch]) -> DepthSupervisionBatch:
    """Concatenate batches along the batch axis, padding K with empty masks."""
    k = max(b.instance_masks.shape[1] for b in batches)
    masks = [np.pad(b.instance_masks, ((0, 0), (0, k - b.instance_masks.shape[1]), (0, 0), (0, 0)))
             for b in batches]
    fields = [np.concatenate([getattr(b, f) for b in batches])
              for f in ("P", "d_sparse", "mask_sparse", "d_dense", "mask_dense")]
    return DepthSupervisionBatch(*fields, np.concatenate(masks))


def smooth_field(shape, seed: int, passes: int = 2) -> np.ndarray:
    """Seeded Gaussian noise box-blurred over the last two axes, unit std."""
    rng = SplitMix64(seed)
    x = rng.normal(int(np.prod(shape))).reshape(shape)
    for _ in range(passes):
        p = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)], mode="wrap")
        x = sum(p[..., dy:dy + shape[-2], dx:dx + shape[-1]] for dy in range(3) for dx in range(3)) / 9.0
    return x / x.std()


@dataclass
class MotionSpec:
    base_feature: np.ndarray  # [B,C,Hb,Wb]
    shift: tuple[int, int] = (1, 0)
    n_frames: int = 4
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.base_feature = np.asarray(self.base_feature, np.float64)
        self.shift = tuple(int(s) for s in self.shift)
        if self.base_feature.ndim != 4:
            raise ValueError("base_feature must be [B,C,Hb,Wb]")
        if max(abs(self.shift[0]), abs(self.shift[1])) > 4:
            raise ValueError("|dy|, |dx| must be <= 4")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")

    @classmethod
    def default(cls, shift=(1, 0), noise_sigma: float = 0.05, channels: int = 2,
                size: int = 16, n_frames: int = 4, seed: int = 0) -> "MotionSpec":
        base = smooth_field((1, channels, size, size), derive_seed(seed, "base"))
        return cls(base, shift, n_frames, noise_sigma, seed)

    @classmethod
    def from_dict(cls, data: dict, root: Path | None = None) -> "MotionSpec":
        """``base_feature`` may be a nested list, an RTEN path, or ``{"shape": [...], "seed": s}``."""
        data = dict(data)
        base = data.get("base_feature", {"shape": [1, 2, 16, 16], "seed": 7})
        if isinstance(base, dict):
            base = smooth_field(tuple(base["shape"]), int(base.get("seed", 0)))
        elif isinstance(base, str):
            base = read_rten(Path(root or ".") / base)
        data["base_feature"] = np.asarray(base, np.float64)
        return cls(**data)

    @classmethod
    def load(cls, path) -> "MotionSpec":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), root=path.parent)


def shift_frame(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[..., y, x] = x[..., y - dy, x - dx], zero where the source leaves the grid."""
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., yd, xd] = x[..., ys, xs]
    return out


def make_moving_bev(spec: MotionSpec, clean: bool = False):
    """Frames ``base`` shifted by ``t * shift`` plus seeded noise; returns ``(frames, shift)``."""
    dy, dx = spec.shift
    rng = SplitMix64(spec.seed)
    frames = []
    for t in range(spec.n_frames):
        f = shift_frame(spec.base_feature, t * dy, t * dx)
        noise = rng.normal(f.size).reshape(f.shape)
        if not clean and spec.noise_sigma > 0:
            f = f + spec.noise_sigma * noise
        frames.append(f)
    return frames, (dy, dx)


def make_instance_bev(boxes, scores, grid, jitter: int = 0, seed: int = 0,
                      inst_channels: int = 4, roi_size=(7, 7)):
    """Box proposals -> ``(S_BEV [1,N,Hb,Wb], E_features [N,C_inst,h,w])``.

    Each box edge is moved by an integer in [-jitter, jitter] (then clipped
    to the grid) to mimic imperfect proposals.  RoI features are seeded per
    instance id so prototypes are distinguishable.
    """
    if len(boxes) < 1 or len(boxes) != len(scores):
        raise ValueError("need at least one box and one score per box")
    hb, wb = grid
    rng = SplitMix64(seed)
    S = np.zeros((1, len(boxes), hb, wb))
    feats = []
    for n, (box, score) in enumerate(zip(boxes, scores)):
        y0, x0, y1, x1 = box
        if jitter > 0:
            j = rng.integers(2 * jitter + 1, 4) - jitter
            y0, x0, y1, x1 = y0 + j[0], x0 + j[1], y1 + j[2], x1 + j[3]
        y0, y1 = sorted((min(max(y0, 0), hb), min(max(y1, 0), hb)))
        x0, x1 = sorted((min(max(x0, 0), wb), min(max(x1, 0), wb)))
        S[0, n, y0:y1, x0:x1] = score
        inst_rng = SplitMix64(derive_seed(seed, "instance", n))
        feats.append(inst_rng.normal(inst_channels * roi_size[0] * roi_size[1]).reshape(
            inst_channels, *roi_size) + n)
    return S, np.stack(feats)
