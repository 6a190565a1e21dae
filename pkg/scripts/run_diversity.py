"""Mean pairwise distance of parent batches and of all leaves, paired over seeds."""

import argparse

import numpy as np

from treediff import experiment as ex


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default="configs/diversity.yaml")
    args = p.parse_args()
    cfg = ex.load_config(args.config)
    budget = cfg.budgets[0]
    parents = {v: [] for v in cfg.variants}
    leaves = {v: [] for v in cfg.variants}
    for seed in cfg.seeds:
        for v in cfg.variants:
            par, lv = ex.plan_diversity(cfg, v, budget, seed)
            parents[v].append(par)
            leaves[v].append(lv)
    print(f"{'variant':<14} {'parents':>8} {'leaves':>8}   ({len(cfg.seeds)} seeds, N={budget})")
    for v in cfg.variants:
        print(f"{v:<14} {np.mean(parents[v]):8.3f} {np.mean(leaves[v]):8.3f}")
    if "TDP" in parents and "TDP-no-PG" in parents:
        gap = np.subtract(parents["TDP"], parents["TDP-no-PG"])
        print(f"paired parent gap with vs without repulsion: {gap.mean():.3f} +- {gap.std(ddof=1) / np.sqrt(len(gap)):.3f}")


if __name__ == "__main__":
    main()
