"""Command line entry point: ``treediff {demos,fit,plan,run,prop1,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as ex
from .prop1 import Prop1Config, run_prop1
from .scores import EmpiricalScoreModel, fit_empirical, load_demo_set, save_demo_set


def _common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="YAML config file")
    p.add_argument("--seed", type=int, default=None, help="master seed (u64)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel grid cells")


def _experiment_config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def cmd_demos(args) -> int:
    cfg = _experiment_config(args)
    spec = cfg.task if args.seed is None else replace(cfg.task, demo_seed=args.seed)
    bundle = ex.build_task(spec)
    out = Path(args.out or "demos")
    manifest = save_demo_set(out, [s for s, _ in bundle.demos])
    np.savez(out / "actions.npz", *[a for _, a in bundle.demos])
    print(f"wrote {len(bundle.demos)} demos to {manifest}")
    return 0


def cmd_fit(args) -> int:
    demos = load_demo_set(args.demos)
    model = fit_empirical(demos)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "model.npz"
    np.savez(path, demos=model.demos, floor=model.floor, shape=np.array(model.shape))
    print(f"fitted empirical score model on {len(demos)} demos of shape {model.shape}: {path}")
    return 0


def load_model(path: str | Path) -> EmpiricalScoreModel:
    z = np.load(path)
    return EmpiricalScoreModel(z["demos"], float(z["floor"]), tuple(int(v) for v in z["shape"]))


def cmd_plan(args) -> int:
    from .planner import plan

    cfg = _experiment_config(args)
    seed = cfg.seeds[0]
    variant = cfg.variants[0]
    bundle = ex.build_task(cfg.task)
    pcfg = cfg.planner_for(variant, cfg.budgets[0], seed)
    problem = ex._problem(cfg.task, replace(pcfg, seed=0))
    res = plan(problem, pcfg)
    guide_scores = np.asarray(problem.guide.value(res.tree.leaves))
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "tree.jsonl", "w") as fh:
        for rec in res.tree.records(guide_scores):
            fh.write(json.dumps(rec) + "\n")
    np.save(out / "plan.npy", bundle.normalizer.denormalize(res.trajectory))
    print(f"{variant}: selected leaf {res.tree.selected} of {len(res.tree.scores)}, true score {res.tree.scores.max():.4f}")
    print(f"reverse steps {res.budget.reverse_steps}, {res.wall_ms:.1f} ms; tree dump in {out / 'tree.jsonl'}")
    return 0


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    path = ex.run_experiment(cfg, args.out, args.workers)
    recs = ex.read_results(path)
    bad = ex.failed_cells(recs)
    print(f"{len(recs)} records written to {path} ({bad} failed)")
    return 1 if bad else 0


def cmd_prop1(args) -> int:
    cfg = ex.load_config(args.config, Prop1Config) if args.config else Prop1Config()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out or "prop1")
    out.mkdir(parents=True, exist_ok=True)
    recs = []
    for init in ("cold", "warm"):
        s = run_prop1(cfg, init)
        recs.append({"schema_version": ex.SCHEMA_VERSION, **s.record(cfg)})
        print(f"{init:>5}: mean |X_perp| = {s.mean_perp:.4f}, mean |X - A v1| = {s.mean_dist_target:.4f}")
    with open(out / "prop1.jsonl", "w") as fh:
        for r in recs:
            fh.write(json.dumps(r) + "\n")
    return 0


def cmd_report(args) -> int:
    text, csv_path = ex.report(args.results, args.out)
    print(text)
    print(f"csv: {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treediff", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)
    for name, fn, helptext in (
        ("demos", cmd_demos, "generate a demonstration set"),
        ("plan", cmd_plan, "run a single plan and dump its tree"),
        ("run", cmd_run, "run a full experiment grid"),
        ("prop1", cmd_prop1, "cold vs warm guided sampling on subspace data"),
    ):
        sp = sub.add_parser(name, help=helptext)
        _common(sp)
        sp.set_defaults(fn=fn)
    sp = sub.add_parser("fit", help="build an empirical score model from a demo manifest")
    _common(sp)
    sp.add_argument("--demos", required=True, help="manifest.json written by `demos`")
    sp.set_defaults(fn=cmd_fit)
    sp = sub.add_parser("report", help="aggregate a results file")
    _common(sp)
    sp.add_argument("--results", required=True, help="results.jsonl written by `run`")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
