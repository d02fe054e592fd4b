"""Central finite-difference checks of the analytic backward passes."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from ..rng import SplitMix64, derive_seed
from .report import CheckReport


@dataclass(frozen=True)
class FiniteDiffConfig:
    h: float = 1e-5
    tol: float = 1e-4
    floor: float = 1e-8
    max_probes: int = 64

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be > 0")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_probes < 1:
            raise ValueError("max_probes must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "FiniteDiffConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"FiniteDiffConfig: unknown fields {sorted(unknown)}")
        return cls(**data)


@dataclass
class GradProblem:
    """A scalar function of named arrays together with its analytic gradient."""

    inputs: dict[str, np.ndarray]
    loss: Callable[[dict], float]
    grad: Callable[[dict], dict]


REGISTRY: dict[str, Callable[[SplitMix64], GradProblem]] = {}


def register(name: str):
    def wrap(builder):
        REGISTRY[name] = builder
        return builder
    return wrap


def targets(prefix: str | None = None) -> list[str]:
    from . import targets as _  # noqa: F401  (populates REGISTRY)
    names = sorted(REGISTRY)
    return [n for n in names if prefix is None or n.startswith(prefix)]


def relative_error(a, b, floor: float = 1e-8):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_difference(f: Callable[[], float], x: np.ndarray, index: int, h: float) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h, perturbing ``x`` in place and restoring it."""
    flat = x.reshape(-1)
    old = flat[index]
    flat[index] = old + h
    fp = f()
    flat[index] = old - h
    fm = f()
    flat[index] = old
    return (fp - fm) / (2.0 * h)


def check_problem(problem: GradProblem, name: str, cfg: FiniteDiffConfig, rng: SplitMix64,
                  report: CheckReport) -> None:
    analytic = problem.grad(problem.inputs)
    for key in sorted(analytic):
        x = problem.inputs[key]
        g = np.asarray(analytic[key], np.float64)
        if g.shape != x.shape:
            report.add(f"{name}:{key}", False, float("inf"), cfg.tol)
            continue
        t0 = time.perf_counter()
        n = min(cfg.max_probes, x.size)
        probes = rng.permutation(x.size)[:n]
        worst = 0.0
        for i in probes:
            fd = central_difference(lambda: problem.loss(problem.inputs), x, int(i), cfg.h)
            worst = max(worst, float(relative_error(g.reshape(-1)[i], fd, cfg.floor)))
        report.add(f"{name}:{key}", worst <= cfg.tol, worst, cfg.tol, (time.perf_counter() - t0) * 1e3)


def gradcheck(target: str, cfg: FiniteDiffConfig | None = None, seed: int = 42) -> CheckReport:
    """Check every differentiable input of ``target`` (or of every target
    matching a ``module.`` prefix, or ``all``)."""
    cfg = FiniteDiffConfig() if cfg is None else cfg
    known = targets()
    if target == "all":
        names = known
    elif target.endswith(".") or target in ("tensor", "pdf", "dgtf", "igdr"):
        names = targets(target.rstrip(".") + ".")
    else:
        names = [target]
    unknown = [n for n in names if n not in REGISTRY]
    if unknown or not names:
        raise KeyError(f"unknown gradcheck target {target!r}; valid targets: {', '.join(known)}")
    report = CheckReport("gradcheck", seed=seed, config={"target": target, **asdict(cfg)})
    for name in names:
        rng = SplitMix64(derive_seed(seed, name))
        problem = REGISTRY[name](rng)
        check_problem(problem, name, cfg, rng, report)
    return report
