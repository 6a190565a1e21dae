"""Run one experiment grid from a YAML config and print its summary.

    python scripts/run_grid.py configs/gold_large.yaml
    python scripts/run_grid.py configs/placement.yaml --workers 4
"""

import argparse
import time

from treediff import experiment as ex


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    cfg = ex.load_config(args.config)
    t0 = time.perf_counter()
    path = ex.run_experiment(cfg, args.out, args.workers)
    text, csv_path = ex.report(path)
    print(text)
    print(f"{len(list(cfg.cells()))} cells in {time.perf_counter() - t0:.0f} s; records {path}, summary {csv_path}")


if __name__ == "__main__":
    main()
