"""Experiment orchestration: configs, presets, ablation grids and summaries.

Output layout of a run directory::

    config.json                    resolved config, every default explicit
    <arm>/seed<k>.csv              metric stream of one (arm, seed)
    <arm>/seed<k>.ema.csv          EMA-model stream (only with track_ema)
    <arm>/seed<k>.resets.jsonl     reset events
    <arm>/seed<k>.error.txt        divergence diagnostic, if the run failed
    summary.json                   RunSummary, recomputable by `summarize`
"""

from __future__ import annotations

import json
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .benchtasks import derive_rng, make_env
from .evalkit import DriftDirection, ParetoPoint, compare_arms, pareto_frontier
from .trainers import DivergenceError, MetricRecord, TrainerConfig, records_from_csv, records_to_csv, run_training

TASK_DIRECTIONS = {"pivot": DriftDirection.HIGHER_IS_BETTER, "continuation": DriftDirection.LOWER_IS_BETTER}

# training budgets of the desk-scale presets; resets split a run into three iterations
PIVOT_STEPS = 300
CONTINUATION_STEPS = 240

_PIVOT_BASE = dict(algo="reinforce", lr=2.5e-4, batch_size=32, entropy_coef=0.01, baseline_decay=0.9,
                   total_steps=PIVOT_STEPS, reset_period=PIVOT_STEPS // 3 + 1, eta=0.99)
_CONT_BASE = dict(algo="ppo", lr=5e-4, batch_size=32, entropy_coef=0.0, gamma=1.0, lam=0.95,
                  total_steps=CONTINUATION_STEPS, reset_period=CONTINUATION_STEPS // 3 + 1, eta=0.995,
                  adaptive_kl=True, target_kl=0.15)


class ConfigError(ValueError):
    pass


@dataclass
class ArmConfig:
    name: str
    trainer: TrainerConfig

    def to_dict(self) -> dict:
        return {"name": self.name, "trainer": self.trainer.to_dict()}


@dataclass
class ExperimentConfig:
    task: str
    arms: list[ArmConfig]
    seeds: list[int]
    output_dir: str = "runs"
    eval_interval: int | None = None
    task_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASK_DIRECTIONS:
            raise ConfigError(f"task: unknown preset {self.task!r}")
        if not self.arms:
            raise ConfigError("arms: need at least one arm")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        names = [a.name for a in self.arms]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ConfigError(f"arms: duplicate names {sorted(dup)}")
        if self.task == "pivot":
            for i, a in enumerate(self.arms):
                if a.trainer.frozen_value:
                    raise ConfigError(f"arms[{i}].trainer.frozen_value: needs a reward model; pivot has none")

    @property
    def direction(self) -> DriftDirection:
        return TASK_DIRECTIONS[self.task]

    def resolved_arms(self) -> list[ArmConfig]:
        if self.eval_interval is None:
            return self.arms
        out = []
        for a in self.arms:
            d = a.trainer.to_dict()
            d["eval_interval"] = self.eval_interval
            out.append(ArmConfig(a.name, TrainerConfig(**d)))
        return out

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "eval_interval": self.eval_interval,
            "task_kwargs": dict(self.task_kwargs),
            "arms": [a.to_dict() for a in self.arms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "preset" in d:
            base = preset(d["preset"])
            for key in ("seeds", "output_dir", "eval_interval"):
                if key in d:
                    setattr(base, key, d[key])
            return base
        for key in ("task", "arms", "seeds"):
            if key not in d:
                raise ConfigError(f"{key}: missing")
        arms = []
        for i, a in enumerate(d["arms"]):
            if "name" not in a:
                raise ConfigError(f"arms[{i}].name: missing")
            try:
                arms.append(ArmConfig(a["name"], TrainerConfig.from_dict(a.get("trainer", {}))))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"arms[{i}].trainer: {exc}") from exc
        return cls(d["task"], arms, [int(s) for s in d["seeds"]], d.get("output_dir", "runs"),
                   d.get("eval_interval"), d.get("task_kwargs", {}))


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# presets


def _arm(name: str, base: dict, **overrides) -> ArmConfig:
    d = dict(base)
    d.update(overrides)
    return ArmConfig(name, TrainerConfig(**d))


def pivot_arms() -> list[ArmConfig]:
    b = _PIVOT_BASE
    return [
        _arm("frozen", b, frozen_sender=True),
        _arm("reinforce", b),
        _arm("kl", b, beta=0.05),
        _arm("multitask", b, lambda_mt=5.0),
        _arm("reset-init", b, beta=0.05, reset_kind="reset_to_init"),
        _arm("reset-ema", b, beta=0.05, reset_kind="reset_to_ema"),
        _arm("elastic-reset", b, beta=0.05, reset_kind="elastic_reset"),
    ]


def continuation_arms() -> list[ArmConfig]:
    b = _CONT_BASE
    return [
        _arm("ppo", b, beta=0.1),
        _arm("nlpo", b, beta=0.1, nlpo=True, top_p=0.9, sync_period=CONTINUATION_STEPS // 12),
        _arm("elastic-reset", b, beta=0.1, reset_kind="elastic_reset"),
    ]


def continuation_ablation_arms() -> list[ArmConfig]:
    """Reset-kind, frozen-value and EMA-tracking arms for the continuation task."""
    b = _CONT_BASE
    return [
        _arm("reset-init", b, beta=0.1, reset_kind="reset_to_init"),
        _arm("reset-ema", b, beta=0.1, reset_kind="reset_to_ema"),
        _arm("ppo-frozen-value", b, beta=0.1, frozen_value=True),
        _arm("ppo-ema-tracked", b, beta=0.1, track_ema=True),
    ]


PRESETS = {
    "paper-core-pivot": lambda: ExperimentConfig("pivot", pivot_arms(), [0, 1, 2, 3, 4], "runs/paper-core-pivot"),
    "paper-core-continuation": lambda: ExperimentConfig("continuation", continuation_arms(), [0, 1, 2, 3, 4],
                                                        "runs/paper-core-continuation"),
    "continuation-ablations": lambda: ExperimentConfig("continuation", continuation_ablation_arms(),
                                                       [0, 1, 2, 3, 4], "runs/continuation-ablations"),
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


AXES = ("eta", "beta", "reset_period", "reset_kind", "frozen_value", "ema_no_reset")


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else str(v)


def ablation_grid(base: ExperimentConfig, axis: str, values, arm: str | None = None) -> ExperimentConfig:
    """One arm per value along ``axis``, copied from a base arm; names carry the value."""
    if axis not in AXES:
        raise ConfigError(f"axis: unknown {axis!r}; choose from {AXES}")
    if not values:
        raise ConfigError("values: need at least one value")
    src = next((a for a in base.arms if a.name == arm), None) if arm else base.arms[0]
    if src is None:
        raise ConfigError(f"arm: {arm!r} not in base config")
    arms = []
    for v in values:
        d = src.trainer.to_dict()
        if axis == "eta":
            v = float(v)
            if not 0 < v < 1:
                raise ConfigError(f"values: eta must lie in (0, 1), got {v}")
            d["eta"] = v
        elif axis == "beta":
            v = float(v)
            if v < 0:
                raise ConfigError(f"values: beta must be >= 0, got {v}")
            d["beta"] = v
        elif axis == "reset_period":
            v = int(v)
            if v < 1:
                raise ConfigError(f"values: reset_period must be positive, got {v}")
            d["reset_period"] = v
        elif axis == "reset_kind":
            d["reset_kind"] = str(v)
        elif axis == "frozen_value":
            v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            if v and d["algo"] != "ppo":
                raise ConfigError("values: frozen_value needs a PPO base arm")
            d["frozen_value"] = v
        elif axis == "ema_no_reset":
            v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            d["track_ema"] = v
            if v:
                d["reset_kind"] = "none"
        try:
            arms.append(ArmConfig(f"{src.name}-{axis}={_fmt(v)}", TrainerConfig(**d)))
        except ValueError as exc:
            raise ConfigError(f"values: {exc}") from exc
    out_dir = str(Path(base.output_dir).parent / f"{Path(base.output_dir).name}-{axis}")
    return ExperimentConfig(base.task, arms, list(base.seeds), out_dir, base.eval_interval, dict(base.task_kwargs))


# ---------------------------------------------------------------------------
# running


@dataclass
class RunOutcome:
    arm: str
    seed: int
    ok: bool
    error: str = ""


def _run_one(cfg: ExperimentConfig, arm: ArmConfig, seed: int, out: Path) -> RunOutcome:
    arm_dir = out / arm.name
    arm_dir.mkdir(parents=True, exist_ok=True)
    stem = arm_dir / f"seed{seed}"
    env = make_env(cfg.task, seed, value_head_detached=arm.trainer.value_head_detached, **cfg.task_kwargs)
    # arms share the per-seed stream (common random numbers): identical phases give identical traces
    rng = derive_rng(seed, "train")
    try:
        res = run_training(env, arm.trainer, rng)
    except DivergenceError as exc:
        Path(f"{stem}.error.txt").write_text(f"{exc}\n")
        for suffix in (".csv", ".ema.csv", ".resets.jsonl"):
            Path(f"{stem}{suffix}").unlink(missing_ok=True)
        return RunOutcome(arm.name, seed, False, str(exc))
    Path(f"{stem}.csv").write_text(records_to_csv(res.records, env.descriptor))
    if arm.trainer.track_ema:
        Path(f"{stem}.ema.csv").write_text(records_to_csv(res.ema_records, env.descriptor))
    with open(f"{stem}.resets.jsonl", "w") as fh:
        for ev in res.reset_events:
            fh.write(json.dumps(ev) + "\n")
    Path(f"{stem}.error.txt").unlink(missing_ok=True)
    return RunOutcome(arm.name, seed, True)


def worker_count() -> int:
    env = os.environ.get("DRIFTLAB_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


_pretrain_lock = threading.Lock()


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> tuple["RunSummary", list[RunOutcome]]:
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = ExperimentConfig(cfg.task, cfg.resolved_arms(), list(cfg.seeds), str(out), cfg.eval_interval,
                                dict(cfg.task_kwargs))
    (out / "config.json").write_text(json.dumps(resolved.to_dict(), indent=2, sort_keys=True) + "\n")
    # pretrained snapshots are cached per seed; build them once, serially
    with _pretrain_lock:
        for seed in resolved.seeds:
            make_env(resolved.task, seed, **resolved.task_kwargs)
    jobs = [(arm, seed) for arm in resolved.arms for seed in resolved.seeds]
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        outcomes = list(pool.map(lambda j: _run_one(resolved, j[0], j[1], out), jobs))
    summary = summarize(out)
    return summary, outcomes


# ---------------------------------------------------------------------------
# summaries


@dataclass
class ArmStats:
    seeds: list[int]
    final_task_mean: float
    final_drift_mean: float
    final_task_se: float | None = None
    final_drift_se: float | None = None

    def to_dict(self) -> dict:
        d = {"seeds": self.seeds, "final_task_mean": self.final_task_mean, "final_drift_mean": self.final_drift_mean}
        if self.final_task_se is not None:
            d["final_task_se"] = self.final_task_se
            d["final_drift_se"] = self.final_drift_se
        return d


@dataclass
class RunSummary:
    task: str
    direction: str
    arms: dict[str, ArmStats]
    dominance: dict[str, dict]
    failed: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "direction": self.direction,
            "arms": {k: v.to_dict() for k, v in self.arms.items()},
            "dominance": self.dominance,
            "failed": self.failed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(x.size))


def mean_curve(runs: list[list[MetricRecord]]) -> list[tuple[int, float, float]]:
    """(step, mean task, mean drift) per record index across seeds."""
    n = min(len(r) for r in runs)
    out = []
    for i in range(n):
        steps = {r[i].step for r in runs}
        if len(steps) != 1:
            raise ValueError(f"seed curves are misaligned at record {i}: steps {sorted(steps)}")
        out.append((runs[0][i].step, float(np.mean([r[i].task_score for r in runs])),
                    float(np.mean([r[i].drift_score for r in runs]))))
    return out


def curve_frontier(runs: list[list[MetricRecord]], arm: str, direction: DriftDirection) -> list[ParetoPoint]:
    pts = [ParetoPoint(t, d, s, arm, -1) for s, t, d in mean_curve(runs)]
    return pareto_frontier(pts, direction)


def load_runs(out_dir, suffix: str = ".csv") -> tuple[dict, dict[str, dict[int, list[MetricRecord]]], list[str]]:
    """Config plus {arm: {seed: records}} and a list of failed runs."""
    out = Path(out_dir)
    cfg_path = out / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"{out} has no config.json; not a run directory")
    cfg = json.loads(cfg_path.read_text())
    runs: dict[str, dict[int, list[MetricRecord]]] = {}
    failed = []
    for arm in cfg["arms"]:
        name = arm["name"]
        for seed in cfg["seeds"]:
            path = out / name / f"seed{seed}{suffix}"
            err = out / name / f"seed{seed}.error.txt"
            if err.exists():
                failed.append(f"{name}/seed{seed}")
                continue
            if not path.exists():
                if suffix != ".csv":
                    continue
                raise FileNotFoundError(f"missing metrics file {path}")
            try:
                runs.setdefault(name, {})[seed] = records_from_csv(path.read_text())
            except (ValueError, IndexError) as exc:
                raise ValueError(f"corrupt metrics file {path}: {exc}") from exc
    return cfg, runs, failed


def summarize(out_dir) -> RunSummary:
    cfg, runs, failed = load_runs(out_dir)
    if not runs and not failed:
        raise ValueError(f"{out_dir} contains no runs")
    direction = TASK_DIRECTIONS[cfg["task"]]
    arms = {}
    frontiers = {}
    for name, by_seed in runs.items():
        seeds = sorted(by_seed)
        tasks = np.array([by_seed[s][-1].task_score for s in seeds])
        drifts = np.array([by_seed[s][-1].drift_score for s in seeds])
        st = ArmStats(seeds, float(tasks.mean()), float(drifts.mean()))
        if len(seeds) > 1:
            st.final_task_se, st.final_drift_se = _se(tasks), _se(drifts)
        arms[name] = st
        frontiers[name] = curve_frontier([by_seed[s] for s in seeds], name, direction)
    dominance = {}
    names = list(runs)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            dominance[f"{a} vs {b}"] = compare_arms(frontiers[a], frontiers[b], direction).to_dict()
    summary = RunSummary(cfg["task"], direction.value, arms, dominance, failed)
    (Path(out_dir) / "summary.json").write_text(summary.to_json())
    return summary


def pareto_table(out_dir, direction: DriftDirection | str | None = None) -> str:
    """CSV of every arm's mean-curve frontier: task_score,drift_score,step,arm,seed."""
    cfg, runs, _ = load_runs(out_dir)
    direction = DriftDirection(direction) if direction else TASK_DIRECTIONS[cfg["task"]]
    lines = ["task_score,drift_score,step,arm,seed"]
    for name, by_seed in runs.items():
        for p in curve_frontier([by_seed[s] for s in sorted(by_seed)], name, direction):
            lines.append(f"{p.task_score!r},{p.drift_score!r},{p.step},{p.arm},{p.seed}")
    return "\n".join(lines) + "\n"
