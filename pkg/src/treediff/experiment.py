"""Experiment grid: task construction, planner execution, JSONL records, reports."""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .envs.maze import DemoSpec, MazeEnv, Normalizer, generate_demos
from .envs.tasks import (
    GoldTask,
    MultiGoalTask,
    PlacementTask,
    gold_guidance,
    gold_true,
    multigoal_guide,
    pnwp_guide,
    pnwp_literal_guide,
)
from .metrics import goal_metrics, pairwise_distance
from .planner import PlannerConfig, execute, make_problem, plan
from .scores import fit_empirical

SCHEMA_VERSION = 1
BI_LEVEL = ("TDP", "TDP-no-PG")
# fields excluded from determinism comparisons
TIMING_FIELDS = ("wall_ms",)


@dataclass(frozen=True)
class TaskSpec:
    """Declarative task description; everything is rebuilt from it deterministically."""

    kind: str = "gold"  # gold | placement | multigoal
    map: str = "large"
    T_pred: int = 64
    n_demos: int = 1000
    demo_seed: int = 0
    via_prob: float = 1.0
    waypoint_jitter: float = 0.0
    endpoint_jitter: float = 0.0
    # demos start in the map's S cells; gold demos also end in its G cells
    threshold: float | None = None
    # placement
    radius: float = 3.0
    angle_local: float = math.pi
    angle_global: float = 0.0
    width_factor: float = 0.5
    c: tuple[float, float, float] = (1.0, 1.5, 2.0)
    guide: str = "peaks"  # peaks | literal
    # multi-goal: goal cells (row, col), heights, widths
    goal_cells: tuple[tuple[int, int], ...] = ((1, 8), (8, 8), (8, 1), (1, 1))
    heights: tuple[float, ...] = (4.0, 2.0, 0.5, 0.25)
    widths: tuple[float, ...] = (0.05, 0.15, 0.2, 0.25)

    def __post_init__(self):
        if self.kind not in ("gold", "placement", "multigoal"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.guide not in ("peaks", "literal"):
            raise ValueError(f"unknown placement guide {self.guide!r}")
        for k in ("c", "heights", "widths"):
            object.__setattr__(self, k, tuple(float(v) for v in getattr(self, k)))
        object.__setattr__(self, "goal_cells", tuple(tuple(int(v) for v in rc) for rc in self.goal_cells))

    @property
    def task_id(self) -> str:
        return f"{self.kind}-{self.map}"


@dataclass(frozen=True)
class TaskBundle:
    spec: TaskSpec
    env: MazeEnv
    task: Any
    normalizer: Normalizer
    model: Any
    guide: Any
    true_guide: Any
    demos: tuple = field(repr=False)


@functools.lru_cache(maxsize=8)
def build_task(spec: TaskSpec) -> TaskBundle:
    env = MazeEnv.builtin(spec.map)
    starts = tuple(env.marked("S")) or None
    start = np.concatenate([env.center(starts[0]), np.zeros(2)]) if starts else None
    if spec.kind == "gold":
        task = GoldTask.from_map(env, T_pred=spec.T_pred, T_max=spec.T_pred, threshold=spec.threshold or 0.3)
        demo_spec = DemoSpec(spec.T_pred, starts, tuple(env.marked("G")), spec.via_prob, spec.waypoint_jitter, spec.endpoint_jitter)
        guide, true_guide = gold_guidance(task), gold_true(task)
    elif spec.kind == "placement":
        task = PlacementTask.symmetric(
            start, spec.radius, spec.angle_local, spec.angle_global, c=spec.c, width_factor=spec.width_factor,
            threshold=spec.threshold or 0.4, T_pred=spec.T_pred, T_max=spec.T_pred,
        )
        demo_spec = DemoSpec(spec.T_pred, starts, None, spec.via_prob, spec.waypoint_jitter, spec.endpoint_jitter)
        guide = pnwp_guide(task) if spec.guide == "peaks" else pnwp_literal_guide(task)
        true_guide = guide
    else:
        goals = np.array([env.center(rc) for rc in spec.goal_cells])
        task = MultiGoalTask(
            start, goals, spec.heights, spec.widths, threshold=spec.threshold or 0.1, T_pred=spec.T_pred,
            T_max=spec.T_pred,
        )
        demo_spec = DemoSpec(spec.T_pred, starts, None, spec.via_prob, spec.waypoint_jitter, spec.endpoint_jitter)
        guide = true_guide = multigoal_guide(task)
    rng = np.random.default_rng(np.random.SeedSequence(spec.demo_seed, spawn_key=(17,)))
    demos = tuple(generate_demos(env, spec.n_demos, rng, demo_spec))
    norm = Normalizer.for_env(env)
    model = fit_empirical([norm.normalize(s) for s, _ in demos])
    return TaskBundle(spec, env, task, norm, model, guide, true_guide, demos)


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = TaskSpec()
    planner: PlannerConfig = PlannerConfig()
    variants: tuple[str, ...] = ("TDP", "MCSS")
    budgets: tuple[int, ...] = (32,)  # parent count N; children default to N
    seeds: tuple[int, ...] = (0,)
    out: str = "results"
    schedule: str = "linear"
    # mono-level variants get N + B samples so every variant has the same leaf count
    equal_leaf_budget: bool = False
    # store visited states and leaf dumps in each record
    store_states: bool = False

    def __post_init__(self):
        if not self.budgets or not self.seeds or not self.variants:
            raise ValueError("variants, budgets and seeds must be nonempty")
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def cells(self):
        for variant in self.variants:
            for budget in self.budgets:
                for seed in self.seeds:
                    yield variant, budget, seed

    def planner_for(self, variant: str, budget: int, seed: int) -> PlannerConfig:
        n = budget
        if self.equal_leaf_budget and variant not in BI_LEVEL:
            n = budget + (self.planner.n_children or budget)
        return replace(self.planner, variant=variant, n_samples=n, schedule=self.schedule, seed=seed)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"{where}: unknown config keys {unknown}")
    kw = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kw[k] = v
    return cls(**kw)


def _seed_list(value):
    """``seeds`` may be a list or ``{start: s, count: n}``."""
    if isinstance(value, dict):
        bad = sorted(set(value) - {"start", "count"})
        if bad or "count" not in value:
            raise ValueError(f"experiment: seeds mapping needs 'count' (and optional 'start'), got {sorted(value)}")
        start = int(value.get("start", 0))
        return list(range(start, start + int(value["count"])))
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    if "seeds" in data:
        data["seeds"] = _seed_list(data["seeds"])
    task = _build(TaskSpec, data.pop("task", {}) or {}, "task")
    planner = _build(PlannerConfig, data.pop("planner", {}) or {}, "planner")
    cfg = _build(ExperimentConfig, data, "experiment")
    return replace(cfg, task=task, planner=planner)


def load_config(path: str | Path, cls=None):
    """Read a YAML config; with ``cls`` build that dataclass instead of an experiment."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    return _build(cls, data, str(path)) if cls is not None else config_from_dict(data)


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg), default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")


# --------------------------------------------------------------------------- running


@functools.lru_cache(maxsize=32)
def _problem(spec: TaskSpec, pcfg: PlannerConfig):
    b = build_task(spec)
    # the state decomposition depends on the task only, never on the plan seed
    return make_problem(b.model, b.task, b.guide, b.true_guide, b.normalizer, replace(pcfg, seed=0))


def run_cell(cfg: ExperimentConfig, variant: str, budget: int, seed: int) -> dict:
    """Plan and roll out one grid cell; returns a flat record."""
    pcfg = cfg.planner_for(variant, budget, seed)
    rec = {
        "schema_version": SCHEMA_VERSION,
        "task": cfg.task.task_id,
        "variant": variant,
        "budget": budget,
        "n_samples": pcfg.n_samples,
        "seed": seed,
    }
    try:
        bundle = build_task(cfg.task)
        problem = _problem(cfg.task, replace(pcfg, seed=0))
        task = bundle.task
        done = None
        if task.kind == "multigoal":
            done = lambda st: len(task.first_visits(st)) == len(task.goals)  # noqa: E731
        roll = execute(bundle.env, problem, pcfg, bundle.normalizer, task.start, done)
    except Exception as exc:  # a failed cell is recorded, the grid continues
        rec.update(status="error", error=f"{type(exc).__name__}: {exc}")
        return rec
    states = roll.states
    rec.update(
        status="ok" if roll.complete else "incomplete",
        steps=int(len(states) - 1),
        plans=roll.plans,
        reverse_steps=roll.reverse_steps,
        infeasible_steps=roll.infeasible_steps,
        wall_ms=roll.wall_ms,
    )
    rec.update(_task_metrics(task, states))
    if cfg.store_states:
        rec["states"] = states.tolist()
        rec["actions"] = roll.actions.tolist()
    return rec


def plan_diversity(cfg: ExperimentConfig, variant: str, budget: int, seed: int) -> tuple[float, float]:
    """Mean pairwise distance of the parent batch and of all leaves of one plan."""
    pcfg = cfg.planner_for(variant, budget, seed)
    res = plan(_problem(cfg.task, replace(pcfg, seed=0)), pcfg)
    return pairwise_distance(res.tree.parents), pairwise_distance(res.tree.leaves)


def _task_metrics(task, states: np.ndarray) -> dict:
    steps = len(states) - 1
    if task.kind == "gold":
        d_gold = float(np.linalg.norm(states[:, :2] - task.gold, axis=1).min())
        d_goal = float(np.linalg.norm(states[-1, :2] - task.goal))
        first = {}
        hit_gold = np.flatnonzero(np.linalg.norm(states[:, :2] - task.gold, axis=1) <= task.threshold)
        if len(hit_gold):
            first["gold"] = int(hit_gold[0])
        m = goal_metrics(first, steps)
        m.update(success=task.success(states), min_gold_dist=d_gold, final_goal_dist=d_goal)
        return m
    if task.kind == "placement":
        return {
            "success": task.reached_global(states),
            "reached_global": task.reached_global(states),
            "reached_local": task.reached_local(states),
            "final_global_dist": float(np.linalg.norm(states[-1, :2] - task.s_global)),
        }
    return goal_metrics(task.first_visits(states), steps, task.priority)


def worker_count(requested: int | None) -> int:
    if os.environ.get("TDP_DETERMINISTIC") == "1":
        return 1
    return max(1, int(requested or 1))


def _run_cell_args(args):
    return run_cell(*args)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, workers: int | None = 1) -> Path:
    """Run every (variant, budget, seed) cell and write ``results.jsonl``.

    Records are appended in completion order; each is self-describing. Returns
    the results path. Cells that raise are written with ``status = "error"``.
    """
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "results.jsonl"
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=1))
    jobs = [(cfg, v, b, s) for v, b, s in cfg.cells()]
    n = worker_count(workers)
    with open(path, "w") as fh:
        if n == 1:
            results = map(_run_cell_args, jobs)
            for rec in results:
                fh.write(json.dumps(rec, default=_jsonable) + "\n")
        else:
            with ProcessPoolExecutor(max_workers=n) as pool:
                for rec in pool.map(_run_cell_args, jobs):
                    fh.write(json.dumps(rec, default=_jsonable) + "\n")
    return path


def read_results(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def strip_timing(rec: dict) -> dict:
    return {k: v for k, v in rec.items() if k not in TIMING_FIELDS}


def failed_cells(records: list[dict]) -> int:
    return sum(1 for r in records if r.get("status") == "error")


# --------------------------------------------------------------------------- report

REPORT_METRICS = ("success", "found", "timesteps_per_goal", "sequence_match", "reached_global", "min_gold_dist", "reverse_steps")


def _mean_se(values: list[float]) -> tuple[float, float, int]:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return math.nan, math.nan, 0
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se, len(v)


def summarize(records: list[dict]) -> list[dict]:
    """Mean and standard error per (task, variant, budget) plus budget-averaged rows.

    ``None`` values (e.g. steps per goal with nothing found) are left out of
    the mean; ``n`` reports how many values entered it.
    """
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        if r.get("status") == "error":
            continue
        groups.setdefault((r["task"], r["variant"], r["budget"]), []).append(r)
    rows = []
    keys = sorted(groups, key=lambda k: (k[0], k[1], k[2]))
    for key in keys:
        rows.append(_row(key[0], key[1], key[2], groups[key]))
    # budget-averaged: mean over budgets of the per-budget means
    by_tv: dict[tuple, list[dict]] = {}
    for row in rows:
        by_tv.setdefault((row["task"], row["variant"]), []).append(row)
    for (task, variant), rs in by_tv.items():
        avg = {"task": task, "variant": variant, "budget": "avg"}
        for m in REPORT_METRICS:
            means = [r[f"{m}_mean"] for r in rs if not math.isnan(r.get(f"{m}_mean", math.nan))]
            if means:
                mu, se, n = _mean_se(means)
                avg.update({f"{m}_mean": mu, f"{m}_se": se, f"{m}_n": n})
        rows.append(avg)
    return rows


def _row(task, variant, budget, recs):
    row = {"task": task, "variant": variant, "budget": budget}
    for m in REPORT_METRICS:
        vals = [float(r[m]) for r in recs if r.get(m) is not None]
        if vals:
            mu, se, n = _mean_se(vals)
            row.update({f"{m}_mean": mu, f"{m}_se": se, f"{m}_n": n})
    return row


def report(results: str | Path, out_dir: str | Path | None = None) -> tuple[str, Path]:
    """Write ``summary.csv`` next to (or into ``out_dir``) and return a text table."""
    results = Path(results)
    rows = summarize(read_results(results))
    out = Path(out_dir) if out_dir else results.parent
    out.mkdir(parents=True, exist_ok=True)
    cols = ["task", "variant", "budget"] + sorted({k for r in rows for k in r} - {"task", "variant", "budget"})
    csv_path = out / "summary.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    lines = [f"{'task':<18} {'variant':<14} {'budget':>6}  success (mean +- se)"]
    for r in rows:
        if "success_mean" in r:
            lines.append(
                f"{r['task']:<18} {r['variant']:<14} {str(r['budget']):>6}  {r['success_mean']:.3f} +- {r['success_se']:.3f}"
            )
    return "\n".join(lines), csv_path
