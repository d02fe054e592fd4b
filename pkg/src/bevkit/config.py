"""Run configuration loaded from a JSON file, with seed resolution."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .harness.gradcheck import FiniteDiffConfig
from .pdf import DepthBinSpec, DepthLossWeights, RankingConfig

DEFAULT_SEED = 42
SEED_ENV = "BEVKIT_SEED"
_KEYS = {"ranking", "weights", "finite_diff", "temperature", "bins", "lr"}


@dataclass
class RunConfig:
    ranking: RankingConfig = field(default_factory=RankingConfig)
    weights: DepthLossWeights = field(default_factory=DepthLossWeights)
    finite_diff: FiniteDiffConfig = field(default_factory=FiniteDiffConfig)
    temperature: float = 1.0
    bins: DepthBinSpec = field(default_factory=DepthBinSpec)
    lr: float = 1e-2

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - _KEYS
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}; expected a subset of {sorted(_KEYS)}")
        kw = {}
        if "ranking" in data:
            kw["ranking"] = RankingConfig.from_dict(data["ranking"])
        if "weights" in data:
            w = data["weights"]
            # a published setting name such as "C" or an explicit mapping
            kw["weights"] = DepthLossWeights.setting(w) if isinstance(w, str) else DepthLossWeights.from_dict(w)
        if "finite_diff" in data:
            kw["finite_diff"] = FiniteDiffConfig.from_dict(data["finite_diff"])
        if "bins" in data:
            kw["bins"] = DepthBinSpec.from_dict(data["bins"])
        for key in ("temperature", "lr"):
            if key in data:
                kw[key] = float(data[key])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self) -> dict:
        return {
            "ranking": asdict(self.ranking),
            "weights": asdict(self.weights),
            "finite_diff": asdict(self.finite_diff),
            "temperature": self.temperature,
            "bins": asdict(self.bins),
            "lr": self.lr,
        }


def resolve_seed(explicit: int | None = None, environ=None) -> int:
    """``--seed`` wins, then ``BEVKIT_SEED``, then 42."""
    if explicit is not None:
        return explicit
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
