#!/usr/bin/env python3
"""Final validation MAE of the full variant as a function of the posterior sample count S.

    python scripts/sample_sweep.py --samples 1 3 5 7 10 --seeds 0 1 --rounds 20
"""
import argparse

import numpy as np

from hafed.config import ExperimentConfig, load_config
from hafed.data import generate
from hafed.federation import run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON config (defaults when omitted)")
    ap.add_argument("--samples", type=int, nargs="+", default=[1, 3, 5, 7, 10])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--rounds", type=int, help="override the number of rounds")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.rounds is not None:
        cfg = cfg.replace(rounds=args.rounds)
    for s in args.samples:
        maes = []
        for seed in args.seeds:
            dataset = generate(cfg.data, seed if cfg.data_seed is None else cfg.data_seed)
            maes.append(run_experiment(cfg.replace(samples=s, seed=seed), dataset).logs[-1].metrics.mae)
        print(f"S={s:2d}: mae " + " ".join(f"{m:.4f}" for m in maes) + f"  mean {np.mean(maes):.4f}")


if __name__ == "__main__":
    main()
