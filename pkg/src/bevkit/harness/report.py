"""Check records and their JSON/text serialisation."""

from __future__ import annotations

import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class CheckRecord:
    name: str
    passed: bool
    value: float
    tol: float
    ms: float = 0.0

    @property
    def status(self) -> str:
        return "pass" if self.passed else "fail"

    def to_json(self) -> dict:
        value = self.value
        if isinstance(value, float) and not math.isfinite(value):
            value = str(value)
        return {"name": self.name, "status": self.status, "value": value, "tol": self.tol, "ms": round(self.ms, 3)}


@dataclass
class CheckReport:
    suite: str
    checks: list[CheckRecord] = field(default_factory=list)
    seed: int | None = None
    config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, value: float, tol: float, ms: float = 0.0) -> CheckRecord:
        rec = CheckRecord(name, bool(passed), float(value), float(tol), ms)
        self.checks.append(rec)
        return rec

    @contextmanager
    def timed(self, name: str, tol: float):
        """Time a block; the block sets ``box['value']`` and ``box['passed']``."""
        box = {"value": float("nan"), "passed": False}
        t0 = time.perf_counter()
        yield box
        self.add(name, box["passed"], box["value"], tol, (time.perf_counter() - t0) * 1e3)

    def extend(self, other: "CheckReport", prefix: str = "") -> None:
        for c in other.checks:
            self.checks.append(CheckRecord(prefix + c.name, c.passed, c.value, c.tol, c.ms))

    def to_json(self) -> dict:
        out = {
            "suite": self.suite,
            "checks": [c.to_json() for c in self.checks],
            "pass": self.passed,
            "seed": self.seed,
            "config": self.config,
        }
        if self.metrics:
            out["metrics"] = self.metrics
        return out

    def to_text(self) -> str:
        lines = [f"suite {self.suite} (seed {self.seed})"]
        for c in self.checks:
            lines.append(f"  [{c.status.upper()}] {c.name}: value={c.value:.3e} tol={c.tol:.1e} ({c.ms:.1f} ms)")
        lines.append(f"{'PASS' if self.passed else 'FAIL'}: {sum(c.passed for c in self.checks)}/{len(self.checks)} checks")
        return "\n".join(lines)

    @classmethod
    def from_json(cls, data: dict) -> "CheckReport":
        checks = [
            CheckRecord(c["name"], c["status"] == "pass", float(c["value"]), float(c["tol"]), float(c["ms"]))
            for c in data.get("checks", [])
        ]
        return cls(data.get("suite", ""), checks, data.get("seed"), data.get("config", {}), data.get("metrics", {}))


def dumps(report: CheckReport) -> str:
    """Canonical JSON: sorted keys, two-space indent, trailing newline."""
    return json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n"


def write_report(report: CheckReport, path, fmt: str = "json") -> None:
    if fmt not in ("json", "text"):
        raise ValueError(f"format must be json or text, got {fmt!r}")
    path = Path(path)
    if path.exists() and path.is_dir():
        raise IsADirectoryError(f"cannot write report to directory {path}")
    text = dumps(report) if fmt == "json" else report.to_text() + "\n"
    path.write_text(text)
