"""Global-peak hit rates on the two-peak placement task, bi-level vs mono-level."""

import argparse
from collections import defaultdict

import numpy as np

from treediff import experiment as ex

BI, MONO = ("TDP", "TDP-no-PG"), ("MCSS", "TDP-no-child")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default="configs/placement.yaml")
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    cfg = ex.load_config(args.config)
    recs = ex.read_results(ex.run_experiment(cfg, args.out, args.workers))
    hits, local = defaultdict(list), defaultdict(list)
    for r in recs:
        hits[r["variant"]].append(bool(r.get("reached_global")))
        local[r["variant"]].append(bool(r.get("reached_local")))
    for v in cfg.variants:
        print(f"{v:<14} global {np.mean(hits[v]):.2f}  local {np.mean(local[v]):.2f}  (n={len(hits[v])})")
    bi = min(np.mean(hits[v]) for v in BI if v in hits)
    mono = max(np.mean(hits[v]) for v in MONO if v in hits)
    print(f"min bi-level / max mono-level = {bi / max(mono, 1e-12):.2f}")


if __name__ == "__main__":
    main()
