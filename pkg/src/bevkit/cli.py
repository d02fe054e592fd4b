"""Command-line entry point: ``bevkit <command> ...``.

Every checking command prints a text report, stores it as the last report
(``.bevkit/last_report.json`` or ``$BEVKIT_STATE``) and exits 0 iff every
check passed.  ``bevkit report`` re-serialises the stored report.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, resolve_seed
from .harness import golden
from .harness.demo import demo_temporal
from .harness.gradcheck import gradcheck, targets
from .harness.props import SUITES, run_props
from .harness.report import CheckReport, dumps, write_report
from .synth import MotionSpec

STATE_ENV = "BEVKIT_STATE"


def state_path() -> Path:
    return Path(os.environ.get(STATE_ENV) or Path(".bevkit") / "last_report.json")


def save_last(report: CheckReport) -> None:
    path = state_path()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(report))
    except OSError as exc:
        print(f"warning: could not store last report at {path}: {exc}", file=sys.stderr)


def load_last() -> CheckReport:
    path = state_path()
    if not path.exists():
        return CheckReport("")
    return CheckReport.from_json(json.loads(path.read_text()))


def cmd_gradcheck(args, cfg: RunConfig, seed: int) -> CheckReport:
    fd = cfg.finite_diff
    updates = {k: v for k, v in (("h", args.h), ("tol", args.tol), ("max_probes", args.max_probes)) if v is not None}
    return gradcheck(args.target, replace(fd, **updates), seed)


def cmd_props(args, cfg: RunConfig, seed: int) -> CheckReport:
    return run_props(args.suite, seed, args.trials, args.dump_dir)


def cmd_golden(args, cfg: RunConfig, seed: int) -> CheckReport:
    if args.action == "generate":
        return golden.generate(args.dir, seed)
    return golden.verify(args.dir)


def cmd_demo(args, cfg: RunConfig, seed: int) -> CheckReport:
    spec = MotionSpec.load(args.spec) if args.spec else MotionSpec.default()
    lr = cfg.lr if args.lr is None else args.lr
    return demo_temporal(spec, args.mode, args.steps, lr, seed)


def cmd_report(args) -> int:
    report = load_last()
    if args.out is None:
        sys.stdout.write(dumps(report) if args.format == "json" else report.to_text() + "\n")
    else:
        write_report(report, args.out, args.format)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bevkit", description="Checks for the depth, temporal and instance modules.")
    ap.add_argument("--config", type=Path, help="JSON run configuration")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--target", default="all", help="operation name, module prefix, or 'all'")
    g.add_argument("--seed", type=int)
    g.add_argument("--h", type=float)
    g.add_argument("--tol", type=float)
    g.add_argument("--max-probes", type=int)
    g.add_argument("--list", action="store_true", help="list registered targets and exit")
    g.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("props", help="randomised property suites")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-dir", type=Path, help="where failing inputs are written")
    p.set_defaults(func=cmd_props)

    gd = sub.add_parser("golden", help="golden-file regression")
    gd.add_argument("action", choices=("generate", "verify"))
    gd.add_argument("--dir", type=Path, required=True)
    gd.add_argument("--seed", type=int)
    gd.set_defaults(func=cmd_golden)

    d = sub.add_parser("demo-temporal", help="temporal alignment demo")
    d.add_argument("--spec", type=Path, help="MotionSpec JSON (default: built-in 2x16x16 field, shift (1,0))")
    d.add_argument("--mode", choices=("oracle", "trained"), default="oracle")
    d.add_argument("--steps", type=int, default=500)
    d.add_argument("--lr", type=float)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_demo)

    r = sub.add_parser("report", help="serialise the last report")
    r.add_argument("--format", choices=("json", "text"), default="json")
    r.add_argument("--out", type=Path)
    r.set_defaults(func=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args)
        if args.command == "gradcheck" and args.list:
            print("\n".join(targets()))
            return 0
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        seed = resolve_seed(args.seed)
        report = args.func(args, cfg, seed)
    except (KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"bevkit {args.command}: error: {msg}", file=sys.stderr)
        return 2
    report.config.setdefault("run", cfg.to_json())
    save_last(report)
    print(report.to_text())
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
