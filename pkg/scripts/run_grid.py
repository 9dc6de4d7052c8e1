#!/usr/bin/env python3
"""Hyperparameter grid search on a source-domain validation split, then a
single test run with the winner (training-domain validation protocol).

Usage: python scripts/run_grid.py [--method tast] [--seed 0]
"""

import argparse
import json

from tast import bench
from tast.engine import TastConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--method", default="tast", choices=["tast", "tast_n", "t3a"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--ne", type=int, default=20)
    args = ap.parse_args()

    spec = bench.SyntheticSpec(mean_radius=3.0, shift=bench.MeanShift(scale=6.4), seed=args.seed)
    data = bench.generate(spec)
    tx, ty, vx, vy = bench.split_train_val(data, val_frac=0.2, seed=args.seed)
    head = bench.train_source_head(tx, ty)

    grid = bench.default_grid(TastConfig(ne=args.ne, seed=args.seed))
    best, accs = bench.grid_search(args.method, head, vx, vy, args.batch_size, grid)
    record = bench.run_online(args.method, head, data.test_X, data.test_y, args.batch_size, best)
    print(json.dumps({
        "method": args.method,
        "best_config": best.to_dict(),
        "best_val_accuracy": max(accs),
        "test_accuracy": record.final_accuracy,
    }, indent=2))


if __name__ == "__main__":
    main()
