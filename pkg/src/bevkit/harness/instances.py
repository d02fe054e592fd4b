"""Canonical fixed-seed problem instances shared by gradcheck, golden and the demos."""

from __future__ import annotations

import numpy as np

from ..dgtf import DgtfParams
from ..igdr import IgdrInputs, IgdrParams
from ..pdf import DepthBinSpec, RankingConfig, gaussian_targets
from ..rng import SplitMix64
from ..synth import Plane, SceneObject, SceneSpec, make_depth_scene, make_instance_bev, stack_scenes
from ..tensor import softmax


def uniform(rng: SplitMix64, shape, lo: float = -2.0, hi: float = 2.0) -> np.ndarray:
    shape = tuple(shape)
    return lo + (hi - lo) * rng.uniform(int(np.prod(shape))).reshape(shape)


def small_bins() -> DepthBinSpec:
    return DepthBinSpec(d_min=1.0, d_max=9.0, D=8)


def small_ranking() -> RankingConfig:
    return RankingConfig(n_edge_pairs=16, n_global_pairs=16, dilation_radius=1, rng_seed=42)


def depth_batch(rng: SplitMix64, bins: DepthBinSpec | None = None):
    """2x8x6x6 supervision batch: two 6x6 scenes, one object each, random P."""
    bins = small_bins() if bins is None else bins
    scenes = [
        SceneSpec(6, 6, [Plane(7.5)], [SceneObject((1, 1, 4, 4), 2.5)],
                  sparse_fraction=0.5, noise_sigma=0.3, seed=11),
        SceneSpec(6, 6, [Plane(8.0), Plane(4.0, (3, 0, 6, 6))], [SceneObject((0, 2, 3, 6), 6.0, "ellipse")],
                  sparse_fraction=0.5, noise_sigma=0.3, seed=12),
    ]
    batch = stack_scenes([make_depth_scene(s, bins) for s in scenes])
    logits = rng.normal(batch.P.size).reshape(batch.P.shape)
    return batch.with_prediction(softmax(logits, axis=1)), bins


def canonical_scene(bins: DepthBinSpec | None = None) -> SceneSpec:
    """32x32 scene: near and far background planes, a car-sized box and a pole."""
    return SceneSpec(
        32, 32,
        background_planes=[Plane(30.0), Plane(12.0, (20, 0, 32, 32))],
        objects=[SceneObject((8, 6, 18, 16), 5.0), SceneObject((4, 22, 20, 26), 18.0, "ellipse")],
        sparse_fraction=0.15, noise_sigma=0.0, seed=3,
    )


def dgtf_problem(rng: SplitMix64, channels: int = 2, size: int = 6):
    params = DgtfParams.init(channels, rng=rng, scale=0.3)
    X = uniform(rng, (1, channels, size, size))
    H = uniform(rng, (1, channels, size, size))
    return X, H, params


def igdr_problem(rng: SplitMix64, channels: int = 2, inst_channels: int = 4, n: int = 3, size: int = 5):
    params = IgdrParams.init(channels, inst_channels, rng=rng, scale=0.3)
    inputs = IgdrInputs(
        F_RC=uniform(rng, (1, channels, size, size)),
        E_features=uniform(rng, (n, inst_channels, 4, 4)),
        S_BEV=uniform(rng, (1, n, size, size), 0.0, 2.0),
        temperature=0.7,
    )
    return inputs, params


def igdr_scene(seed: int = 5):
    """Jittered box proposals on a 12x12 grid with identity-ish parameters."""
    S, E = make_instance_bev([(1, 1, 6, 6), (5, 4, 11, 10), (0, 8, 4, 12)], [2.0, 1.5, 1.0],
                             (12, 12), jitter=1, seed=seed)
    rng = SplitMix64(seed)
    params = IgdrParams.init(3, 4, rng=rng, scale=0.2)
    inputs = IgdrInputs(F_RC=uniform(rng, (1, 3, 12, 12)), E_features=E, S_BEV=S, temperature=0.5)
    return inputs, params


def perfect_prediction(batch, bins: DepthBinSpec, sigma: float | None = None):
    """Replace P by the Gaussian target of the dense depth at every pixel."""
    return batch.with_prediction(gaussian_targets(batch.d_dense, bins, sigma).transpose(0, 3, 1, 2))
