"""Golden-file regression over the canonical fixed-seed instances.

``generate`` writes, per case, every input, parameter and output tensor as
f64 RTEN plus an f32 copy of each output.  ``verify`` recomputes the cases
and compares: f64 files must match bit for bit, f32 files within 1e-6
relative of the recomputed f64 value.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .. import dgtf, igdr, pdf, tensor
from ..io import RtenFormatError, read_rten, write_rten
from ..rng import SplitMix64, derive_seed
from ..synth import make_depth_scene
from .instances import (canonical_scene, depth_batch, dgtf_problem, igdr_problem, igdr_scene,
                        perfect_prediction, small_ranking, uniform)
from .report import CheckReport

F32_RTOL = 1e-6
F32_FLOOR = 1e-30
_LOSS_KEYS = ("l_prob", "l_abs", "l_dense", "l_found", "l_edge", "l_global", "l_relative", "l_depth")


def _losses(r: pdf.DepthLossReport) -> np.ndarray:
    return np.array([getattr(r, k) for k in _LOSS_KEYS])


def _tensor_conv(rng):
    x, w, b = uniform(rng, (1, 2, 7, 6)), uniform(rng, (3, 2, 3, 3)), uniform(rng, (3,))
    return {"in.x": x, "param.w": w, "param.b": b}, {"out.y": tensor.conv2d(x, w, b, 1)}


def _tensor_bilinear(rng):
    f = uniform(rng, (1, 3, 5, 6))
    py, px = uniform(rng, (1, 17), -1.5, 5.5), uniform(rng, (1, 17), -1.5, 6.5)
    return {"in.feature": f, "in.py": py, "in.px": px}, {"out.samples": tensor.bilinear_gather(f, py, px)}


def _pdf_total(rng):
    batch, bins = depth_batch(rng)
    cfg = small_ranking()
    weights = pdf.DepthLossWeights()
    r = pdf.total_depth_loss(batch, bins, cfg, weights)
    dP = pdf.total_depth_loss_backward(batch, bins, cfg, weights, r.pairs)
    ins = {"in.P": batch.P, "in.d_sparse": batch.d_sparse, "in.mask_sparse": batch.mask_sparse,
           "in.d_dense": batch.d_dense, "in.mask_dense": batch.mask_dense, "in.instance_masks": batch.instance_masks}
    return ins, {"out.losses": _losses(r), "out.dP": dP,
                 "out.edge_pairs": r.pairs.edge.astype(np.float64),
                 "out.global_pairs": r.pairs.global_.astype(np.float64)}


def _pdf_perfect(rng):
    bins = pdf.DepthBinSpec()
    batch = perfect_prediction(make_depth_scene(canonical_scene(), bins), bins)
    r = pdf.total_depth_loss(batch, bins, pdf.RankingConfig(), pdf.DepthLossWeights())
    return {"in.d_dense": batch.d_dense, "in.instance_masks": batch.instance_masks}, {"out.losses": _losses(r)}


def _dgtf_step(rng):
    X, H, params = dgtf_problem(rng)
    tr = dgtf.dgtf_forward(X, H, params)
    ins = {"in.X": X, "in.H_prev": H, **{f"param.{k}": v for k, v in params.tensors().items()}}
    return ins, {"out.delta": tr.delta, "out.m": tr.m, "out.aligned": tr.aligned, "out.H": tr.H, "out.F_RC": tr.F}


def _igdr(build):
    def case(rng):
        inputs, params = build(rng)
        out = igdr.igdr_forward(inputs, params)
        ins = {"in.F_RC": inputs.F_RC, "in.E_features": inputs.E_features, "in.S_BEV": inputs.S_BEV,
               **{f"param.{k}": v for k, v in params.tensors().items()}}
        return ins, {f"out.{k}": v for k, v in out.intermediates().items()}
    return case


CASES = {
    "tensor.conv2d": _tensor_conv,
    "tensor.bilinear_gather": _tensor_bilinear,
    "pdf.total_depth_loss": _pdf_total,
    "pdf.perfect_prediction": _pdf_perfect,
    "dgtf.dgtf_step": _dgtf_step,
    "igdr.igdr_forward": _igdr(igdr_problem),
    "igdr.igdr_scene": _igdr(lambda rng: igdr_scene()),
}


def compute_cases(seed: int = 42) -> dict[str, tuple[dict, dict]]:
    return {name: build(SplitMix64(derive_seed(seed, name))) for name, build in CASES.items()}


def generate(directory, seed: int = 42) -> CheckReport:
    directory = Path(directory)
    report = CheckReport("golden:generate", seed=seed, config={"dir": str(directory)})
    manifest = {"seed": seed, "cases": {}}
    for case, (ins, outs) in compute_cases(seed).items():
        t0 = time.perf_counter()
        files = {}
        for name, arr in {**ins, **outs}.items():
            files[f"{name}.f64"] = f"{case}/{name}.f64.rten"
            write_rten(directory / files[f"{name}.f64"], arr, "f64")
        for name, arr in outs.items():
            files[f"{name}.f32"] = f"{case}/{name}.f32.rten"
            write_rten(directory / files[f"{name}.f32"], arr, "f32")
        manifest["cases"][case] = files
        report.add(f"{case}:written", True, float(len(files)), 0.0, (time.perf_counter() - t0) * 1e3)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return report


def _compare(stored: np.ndarray, expected: np.ndarray, kind: str) -> tuple[bool, float]:
    if stored.shape != expected.shape:
        return False, float("inf")
    if kind == "f64":
        same = stored.tobytes() == np.ascontiguousarray(expected, np.float64).tobytes()
        return same, float(np.abs(stored - expected).max(initial=0.0))
    s = stored.astype(np.float64)
    rel = np.abs(s - expected) / np.maximum(np.abs(expected), F32_FLOOR)
    worst = float(rel.max(initial=0.0))
    return worst <= F32_RTOL, worst


def verify(directory, seed: int | None = None) -> CheckReport:
    """Recompute every case and compare to the files under ``directory``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        cases = manifest["cases"]
    except (OSError, ValueError, KeyError) as exc:
        report = CheckReport("golden:verify", seed=seed, config={"dir": str(directory)})
        report.add(f"manifest: {type(exc).__name__}: {exc}", False, float("inf"), 0.0)
        return report
    seed = manifest.get("seed", 42) if seed is None else seed
    report = CheckReport("golden:verify", seed=seed, config={"dir": str(directory)})
    for case, (ins, outs) in compute_cases(seed).items():
        files = cases.get(case)
        if files is None:
            report.add(f"{case}: missing from manifest", False, float("inf"), 0.0)
            continue
        expected = {f"{n}.f64": (a, "f64") for n, a in {**ins, **outs}.items()}
        expected.update({f"{n}.f32": (a, "f32") for n, a in outs.items()})
        for key in sorted(expected):
            arr, kind = expected[key]
            tol = 0.0 if kind == "f64" else F32_RTOL
            t0 = time.perf_counter()
            if key not in files:
                report.add(f"{case}/{key}: missing from manifest", False, float("inf"), tol)
                continue
            try:
                stored = read_rten(directory / files[key])
            except FileNotFoundError:
                report.add(f"{case}/{key}: missing file", False, float("inf"), tol)
                continue
            except RtenFormatError as exc:
                report.add(f"{case}/{key}: corrupt ({exc})", False, float("inf"), tol)
                continue
            ok, value = _compare(stored, np.asarray(arr, np.float64), kind)
            report.add(f"{case}/{key}", ok, value, tol, (time.perf_counter() - t0) * 1e3)
    return report
