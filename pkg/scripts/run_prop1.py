"""Cold vs warm guided sampling on subspace data, plus a sweep over the off-subspace width."""

import argparse
from dataclasses import replace

from treediff import experiment as ex
from treediff.prop1 import Prop1Config, run_prop1, sweep_sigma2


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default="configs/prop1.yaml")
    p.add_argument("--sigma2", type=float, nargs="*", default=[0.2, 0.3, 0.4, 0.6, 1.0])
    p.add_argument("--trials", type=int, default=None)
    args = p.parse_args()
    cfg = ex.load_config(args.config, Prop1Config)
    if args.trials:
        cfg = replace(cfg, trials=args.trials)
    for init in ("cold", "warm"):
        s = run_prop1(cfg, init)
        print(f"{init:>5}: |X_perp| {s.mean_perp:.4f}  |X - A v1| {s.mean_dist_target:.4f}  reverse steps {s.reverse_steps}")
    print(f"unguided warm: |X_perp| {run_prop1(replace(cfg, alpha=0.0), 'warm').mean_perp:.4f}")
    for s2, s in zip(args.sigma2, sweep_sigma2(cfg, args.sigma2)):
        print(f"sigma2 {s2:.2f}: cold |X_perp| {s.mean_perp:.4f}")


if __name__ == "__main__":
    main()
