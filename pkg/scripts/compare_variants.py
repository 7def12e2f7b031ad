#!/usr/bin/env python3
"""Train the variant ladder on the toy dataset and print final MAE and shrinkage per seed.

    python scripts/compare_variants.py --seeds 0 1 2 --rounds 30 --out ladder.csv
"""
import argparse
import csv
import time

import numpy as np

from hafed.config import ExperimentConfig, load_config
from hafed.data import generate
from hafed.federation import run_experiment

VARIANTS = ("ha_fedformer", "ha_fedformer_plus", "ha_fedformer_pp_s", "ha_fedformer_pp")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON config (defaults when omitted)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--rounds", type=int, help="override the number of rounds")
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    ap.add_argument("--out", help="optional CSV of (variant, seed, round, mae, shrinkage)")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.rounds is not None:
        cfg = cfg.replace(rounds=args.rounds)
    rows, final = [], {}
    for seed in args.seeds:
        dataset = generate(cfg.data, seed if cfg.data_seed is None else cfg.data_seed)
        for variant in args.variants:
            t0 = time.perf_counter()
            res = run_experiment(cfg.replace(variant=variant, seed=seed), dataset)
            rows += [[variant, seed, r.round, r.metrics.mae, r.shrinkage] for r in res.logs]
            last = res.logs[-1]
            final[variant, seed] = last.metrics.mae
            print(f"{variant:20s} seed {seed}: mae {last.metrics.mae:.4f}  shrinkage "
                  f"{res.logs[1].shrinkage:.4f} -> {last.shrinkage:.4f}  ({time.perf_counter() - t0:.0f}s)")
    print()
    for variant in args.variants:
        maes = np.array([final[variant, s] for s in args.seeds])
        print(f"{variant:20s} mean mae {maes.mean():.4f} (sd {maes.std():.4f})")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["variant", "seed", "round", "mae", "shrinkage"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
