"""Instance-guided refinement of a fused BEV feature map.

Per-instance prototypes (pooled and projected RoI features) are spread over
the BEV grid by a temperature softmax over the instance scores, turned into
a per-pixel scale and bias by two 3x3 convolutions, and applied to the BEV
feature only where a sigmoid foreground gate (computed from the summed
instance scores) opens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import load_tensors, save_tensors, write_rten
from .rng import SplitMix64
from .tensor import (
    ShapeError,
    batched_matmul,
    batched_matmul_backward,
    conv2d,
    conv2d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    sigmoid,
    softmax,
    softmax_backward,
)

TENSOR_FIELDS = (
    "proj_w", "proj_b",
    "gamma_w", "gamma_b",
    "beta_w", "beta_b",
    "gate_w", "gate_b",
)


@dataclass
class IgdrParams:
    proj_w: np.ndarray  # [C_inst, C_inst]
    proj_b: np.ndarray  # [C_inst]
    gamma_w: np.ndarray  # [C, C_inst, 3, 3]
    gamma_b: np.ndarray  # [C]
    beta_w: np.ndarray
    beta_b: np.ndarray
    gate_w: np.ndarray  # [1, 1, 3, 3]
    gate_b: np.ndarray  # [1]

    def __post_init__(self):
        for name in TENSOR_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        ci = self.proj_w.shape[0]
        c = self.gamma_w.shape[0]
        expect = {
            "proj_w": (ci, ci), "proj_b": (ci,),
            "gamma_w": (c, ci, 3, 3), "gamma_b": (c,),
            "beta_w": (c, ci, 3, 3), "beta_b": (c,),
            "gate_w": (1, 1, 3, 3), "gate_b": (1,),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {getattr(self, name).shape}")

    @property
    def channels(self) -> int:
        return self.gamma_w.shape[0]

    @property
    def inst_channels(self) -> int:
        return self.proj_w.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_FIELDS}

    @classmethod
    def identity(cls, channels: int, inst_channels: int) -> "IgdrParams":
        """No-op initialisation: gamma == 1, beta == 0, gate == 0.5 everywhere."""
        c, ci = channels, inst_channels
        return cls(
            proj_w=np.eye(ci), proj_b=np.zeros(ci),
            gamma_w=np.zeros((c, ci, 3, 3)), gamma_b=np.ones(c),
            beta_w=np.zeros((c, ci, 3, 3)), beta_b=np.zeros(c),
            gate_w=np.zeros((1, 1, 3, 3)), gate_b=np.zeros(1),
        )

    @classmethod
    def init(cls, channels: int, inst_channels: int, rng: SplitMix64 | None = None,
             scale: float = 0.2) -> "IgdrParams":
        """Identity initialisation perturbed by seeded N(0, scale^2) noise."""
        rng = SplitMix64(0) if rng is None else rng
        base = cls.identity(channels, inst_channels)
        noisy = {name: t + scale * rng.normal(t.size).reshape(t.shape) for name, t in base.tensors().items()}
        return cls(**noisy)

    def save(self, directory) -> None:
        save_tensors(self.tensors(), directory, {
            "channels": self.channels, "inst_channels": self.inst_channels,
        })

    @classmethod
    def load(cls, directory) -> "IgdrParams":
        tensors, _ = load_tensors(directory)
        return cls(**tensors)


@dataclass
class IgdrInputs:
    F_RC: np.ndarray  # [B,C,Hb,Wb]
    E_features: np.ndarray  # [N,C_inst,H',W']
    S_BEV: np.ndarray  # [B,N,Hb,Wb], nonnegative
    temperature: float = 1.0

    def validate(self) -> None:
        if self.F_RC.ndim != 4 or self.S_BEV.ndim != 4 or self.E_features.ndim != 4:
            raise ShapeError("F_RC, S_BEV and E_features must all be rank 4")
        b, _, h, w = self.F_RC.shape
        if self.S_BEV.shape[0] != b or self.S_BEV.shape[2:] != (h, w):
            raise ShapeError(f"S_BEV {self.S_BEV.shape} does not cover F_RC grid {(b, h, w)}")
        if self.S_BEV.shape[1] != self.E_features.shape[0]:
            raise ShapeError(
                f"instance axis: S_BEV has N={self.S_BEV.shape[1]}, E_features has N={self.E_features.shape[0]}"
            )
        if np.any(self.S_BEV < 0):
            raise ValueError("S_BEV must be nonnegative")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        for name in ("F_RC", "E_features", "S_BEV"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name}: non-finite values")


@dataclass
class IgdrOutput:
    F_final: np.ndarray
    E_proj: np.ndarray | None = None
    A_prob: np.ndarray | None = None
    E_BEV: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    F_calibrated: np.ndarray | None = None
    G_bg: np.ndarray | None = None
    passthrough: bool = False
    flags: tuple[str, ...] = field(default_factory=tuple)

    def intermediates(self) -> dict[str, np.ndarray]:
        names = ("F_final", "E_proj", "A_prob", "E_BEV", "gamma", "beta", "F_calibrated", "G_bg")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def dump(self, directory) -> None:
        """Write every intermediate as ``<name>.rten`` under ``directory``."""
        directory = Path(directory)
        for name, arr in self.intermediates().items():
            write_rten(directory / f"{name}.rten", arr)


# ---------------------------------------------------------------------------
# prototypes
# ---------------------------------------------------------------------------

def pool_project(E_features, params: IgdrParams, batch: int = 1) -> np.ndarray:
    """[N,C_inst,H',W'] -> [B,N,C_inst]: spatial mean, affine projection, batch replication."""
    pooled = global_avg_pool(E_features)
    if pooled.shape[1] != params.inst_channels:
        raise ShapeError(f"E_features has C_inst={pooled.shape[1]}, params expect {params.inst_channels}")
    proj = pooled @ params.proj_w.T + params.proj_b
    return np.broadcast_to(proj, (batch,) + proj.shape).copy()


def pool_project_backward(grad_out, E_features, params: IgdrParams):
    """Return ``(dE_features, d_proj_w, d_proj_b)``."""
    g = np.asarray(grad_out, np.float64).sum(axis=0)  # [N,C_inst]
    pooled = global_avg_pool(E_features)
    d_pooled = g @ params.proj_w
    return global_avg_pool_backward(d_pooled, E_features.shape), g.T @ pooled, g.sum(axis=0)


def softmax_assign(S_BEV, temperature: float = 1.0) -> np.ndarray:
    """Per-pixel softmax of instance scores over the instance axis."""
    return softmax(S_BEV, axis=1, temperature=temperature)


def softmax_assign_backward(grad_out, A_prob, temperature: float = 1.0):
    return softmax_backward(grad_out, A_prob, axis=1, temperature=temperature)


def _flat_assign(A_prob):
    b, n, h, w = A_prob.shape
    return A_prob.reshape(b, n, h * w).transpose(0, 2, 1)  # [B,HW,N]


def broadcast_prototypes(A_prob, E_proj) -> np.ndarray:
    """E_BEV[b,:,p] = sum_n A_prob[b,n,p] * E_proj[b,n,:] as one batched matmul."""
    A_prob = np.asarray(A_prob, np.float64)
    b, n, h, w = A_prob.shape
    out = batched_matmul(_flat_assign(A_prob), E_proj)  # [B,HW,C_inst]
    return np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(b, -1, h, w)


def broadcast_prototypes_backward(grad_out, A_prob, E_proj):
    """Return ``(dA_prob, dE_proj)``."""
    b, n, h, w = A_prob.shape
    g = np.asarray(grad_out, np.float64).reshape(b, -1, h * w).transpose(0, 2, 1)
    dA_flat, dE = batched_matmul_backward(g, _flat_assign(A_prob), E_proj)
    return np.ascontiguousarray(dA_flat.transpose(0, 2, 1)).reshape(b, n, h, w), dE


# ---------------------------------------------------------------------------
# calibration and gating
# ---------------------------------------------------------------------------

def gen_affine(E_BEV, params: IgdrParams):
    """Per-pixel ``(gamma, beta)`` from two unactivated 3x3 convolutions."""
    return (conv2d(E_BEV, params.gamma_w, params.gamma_b, 1),
            conv2d(E_BEV, params.beta_w, params.beta_b, 1))


def gen_affine_backward(d_gamma, d_beta, E_BEV, params: IgdrParams):
    """Return ``(dE_BEV, grads)`` with ``grads`` keyed by gamma/beta weight names."""
    dE1, gw, gb = conv2d_backward(d_gamma, E_BEV, params.gamma_w, 1)
    dE2, bw, bb = conv2d_backward(d_beta, E_BEV, params.beta_w, 1)
    return dE1 + dE2, {"gamma_w": gw, "gamma_b": gb, "beta_w": bw, "beta_b": bb}


def calibrate(F_RC, gamma, beta) -> np.ndarray:
    F_RC, gamma, beta = (np.asarray(a, np.float64) for a in (F_RC, gamma, beta))
    if not F_RC.shape == gamma.shape == beta.shape:
        raise ShapeError(f"calibrate: shapes {F_RC.shape}, {gamma.shape}, {beta.shape} differ")
    return F_RC * gamma + beta


def calibrate_backward(grad_out, F_RC, gamma):
    """Return ``(dF_RC, d_gamma, d_beta)``."""
    g = np.asarray(grad_out, np.float64)
    return g * gamma, g * F_RC, g


def foreground_gate(S_BEV, params: IgdrParams) -> np.ndarray:
    """sigmoid(conv_gate(sum over instances of S_BEV)) -> [B,1,Hb,Wb]."""
    occupancy = np.asarray(S_BEV, np.float64).sum(axis=1, keepdims=True)
    return sigmoid(conv2d(occupancy, params.gate_w, params.gate_b, 1))


def foreground_gate_backward(grad_out, S_BEV, params: IgdrParams, G_bg):
    """Return ``(dS_BEV, d_gate_w, d_gate_b)``."""
    occupancy = np.asarray(S_BEV, np.float64).sum(axis=1, keepdims=True)
    d_pre = np.asarray(grad_out, np.float64) * G_bg * (1.0 - G_bg)
    d_occ, dw, db = conv2d_backward(d_pre, occupancy, params.gate_w, 1)
    return np.broadcast_to(d_occ, S_BEV.shape).copy(), dw, db


def gated_fuse(F_RC, F_calibrated, G_bg) -> np.ndarray:
    """(1 - G) * F_RC + G * F_calibrated with G broadcast over channels."""
    G = np.asarray(G_bg, np.float64)
    if G.ndim != 4 or G.shape[1] != 1:
        raise ShapeError(f"G_bg must be [B,1,H,W], got {G.shape}")
    return (1.0 - G) * F_RC + G * F_calibrated


def gated_fuse_backward(grad_out, F_RC, F_calibrated, G_bg):
    """Return ``(dF_RC, dF_calibrated, dG_bg)``."""
    g = np.asarray(grad_out, np.float64)
    return g * (1.0 - G_bg), g * G_bg, (g * (F_calibrated - F_RC)).sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

def igdr_forward(inputs: IgdrInputs, params: IgdrParams) -> IgdrOutput:
    """Full refinement; keeps every intermediate on the returned object.

    With no instances (N == 0) the BEV feature passes through unchanged.
    """
    F_RC = np.asarray(inputs.F_RC, np.float64)
    if inputs.E_features.shape[0] == 0 or inputs.S_BEV.shape[1] == 0:
        return IgdrOutput(F_final=F_RC.copy(), passthrough=True, flags=("no-instance passthrough",))
    inputs.validate()
    if F_RC.shape[1] != params.channels:
        raise ShapeError(f"channel axis: F_RC has C={F_RC.shape[1]}, params expect {params.channels}")
    E_proj = pool_project(inputs.E_features, params, batch=F_RC.shape[0])
    A_prob = softmax_assign(inputs.S_BEV, inputs.temperature)
    E_BEV = broadcast_prototypes(A_prob, E_proj)
    gamma, beta = gen_affine(E_BEV, params)
    F_cal = calibrate(F_RC, gamma, beta)
    G = foreground_gate(inputs.S_BEV, params)
    F_final = gated_fuse(F_RC, F_cal, G)
    return IgdrOutput(F_final, E_proj, A_prob, E_BEV, gamma, beta, F_cal, G)


def igdr_backward(inputs: IgdrInputs, params: IgdrParams, out: IgdrOutput, dF_final) -> dict[str, np.ndarray]:
    """Gradients w.r.t. ``F_RC``, ``E_features``, ``S_BEV`` and every parameter."""
    if out.passthrough:
        return {"F_RC": np.asarray(dF_final, np.float64).copy()}
    F_RC = np.asarray(inputs.F_RC, np.float64)
    grads = {}
    dF, dF_cal, dG = gated_fuse_backward(dF_final, F_RC, out.F_calibrated, out.G_bg)
    dS_gate, grads["gate_w"], grads["gate_b"] = foreground_gate_backward(dG, inputs.S_BEV, params, out.G_bg)
    dF2, d_gamma, d_beta = calibrate_backward(dF_cal, F_RC, out.gamma)
    dE_BEV, affine_grads = gen_affine_backward(d_gamma, d_beta, out.E_BEV, params)
    grads.update(affine_grads)
    dA, dE_proj = broadcast_prototypes_backward(dE_BEV, out.A_prob, out.E_proj)
    dS_soft = softmax_assign_backward(dA, out.A_prob, inputs.temperature)
    grads["E_features"], grads["proj_w"], grads["proj_b"] = pool_project_backward(dE_proj, inputs.E_features, params)
    grads["F_RC"] = dF + dF2
    grads["S_BEV"] = dS_gate + dS_soft
    return grads
