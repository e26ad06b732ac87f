"""Command-line entry point: ``driftlab run | ablate | summarize | pareto``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .evalkit import DriftDirection, compare_arms
from .runner import (
    PRESETS,
    TASK_DIRECTIONS,
    ConfigError,
    ExperimentConfig,
    ablation_grid,
    curve_frontier,
    load_config,
    load_runs,
    pareto_table,
    preset,
    run_experiment,
    summarize,
)


def parse_seeds(text: str) -> list[int]:
    """``"0..4"`` (inclusive range), ``"0,2,7"`` or a single integer."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use e.g. 0..4 or 0,1,2") from None


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else preset(args.preset)
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def _execute(cfg: ExperimentConfig) -> int:
    summary, outcomes = run_experiment(cfg)
    for o in outcomes:
        if not o.ok:
            print(f"diverged: {o.arm} seed {o.seed}: {o.error}", file=sys.stderr)
    print(summary.to_json(), end="")
    print(f"wrote {cfg.output_dir}", file=sys.stderr)
    return 0 if all(o.ok for o in outcomes) else 1


def cmd_run(args) -> int:
    return _execute(_base_config(args))


def cmd_ablate(args) -> int:
    base = _base_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    cfg = ablation_grid(base, args.axis, values, args.arm)
    if args.out is not None:
        cfg.output_dir = args.out
    return _execute(cfg)


def cmd_summarize(args) -> int:
    print(summarize(args.dir).to_json(), end="")
    return 0


def cmd_pareto(args) -> int:
    cfg, runs, _ = load_runs(args.dir)
    direction = DriftDirection(args.direction) if args.direction else TASK_DIRECTIONS[cfg["task"]]
    table = pareto_table(args.dir, direction)
    out = Path(args.dir)
    (out / "pareto.csv").write_text(table)
    fronts = {name: curve_frontier([by_seed[s] for s in sorted(by_seed)], name, direction)
              for name, by_seed in runs.items()}
    names = list(fronts)
    report = {f"{a} vs {b}": compare_arms(fronts[a], fronts[b], direction).to_dict()
              for i, a in enumerate(names) for b in names[i + 1:]}
    (out / "dominance.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="driftlab", description="Drift-mitigated RL fine-tuning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_source(sp):
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="experiment config JSON")
        src.add_argument("--preset", choices=sorted(PRESETS), help="built-in experiment preset")
        sp.add_argument("--seeds", type=parse_seeds, default=None, help="e.g. 0..4 or 0,1,2")
        sp.add_argument("--out", default=None, help="output directory")

    run = sub.add_parser("run", help="run every (arm, seed) of an experiment")
    add_source(run)
    run.set_defaults(func=cmd_run)

    abl = sub.add_parser("ablate", help="sweep one axis of a base arm")
    add_source(abl)
    abl.add_argument("--axis", required=True, help="eta | beta | reset_period | reset_kind | frozen_value | ema_no_reset")
    abl.add_argument("--values", required=True, help="comma-separated values")
    abl.add_argument("--arm", default=None, help="base arm name (default: first arm)")
    abl.set_defaults(func=cmd_ablate)

    sm = sub.add_parser("summarize", help="recompute summary.json from a run directory")
    sm.add_argument("dir")
    sm.set_defaults(func=cmd_summarize)

    pa = sub.add_parser("pareto", help="write pareto.csv and dominance.json for a run directory")
    pa.add_argument("dir")
    pa.add_argument("--direction", choices=[d.value for d in DriftDirection], default=None,
                    help="drift orientation (default: the task's)")
    pa.set_defaults(func=cmd_pareto)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"driftlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
