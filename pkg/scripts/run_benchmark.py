#!/usr/bin/env python3
"""Compare all adaptation methods on the default synthetic mean-shift stream.

Usage: python scripts/run_benchmark.py [--seeds 0 1 2 3 4] [--batch-size 32]
"""

import argparse

import numpy as np

from tast import bench
from tast.engine import TastConfig
from tast.tastbn import TastBnConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--shift-scale", type=float, default=6.4)
    args = ap.parse_args()

    rows = {m: [] for m in ("none", "t3a", "tast_n", "tast", "tentclf", "plclf",
                            "none_bn", "tast_bn")}
    for seed in args.seeds:
        spec = bench.SyntheticSpec(mean_radius=3.0,
                                   shift=bench.MeanShift(scale=args.shift_scale),
                                   seed=seed)
        data = bench.generate(spec)
        head = bench.train_source_head(data.train_X, data.train_y)
        X, y = data.test_X, data.test_y
        bs = args.batch_size
        rows["none"].append(bench.run_online("none", head, X, y, bs).final_accuracy)
        rows["t3a"].append(bench.run_online(
            "t3a", head, X, y, bs, TastConfig(m=100, seed=seed)).final_accuracy)
        rows["tast_n"].append(bench.run_online(
            "tast_n", head, X, y, bs, TastConfig(ns=4, m=100, seed=seed)).final_accuracy)
        rows["tast"].append(bench.run_online(
            "tast", head, X, y, bs,
            TastConfig(ne=20, ns=4, steps=1, m=100, seed=seed)).final_accuracy)
        rows["tentclf"].append(bench.run_online(
            "tentclf", head, X, y, bs, TastConfig(seed=seed)).final_accuracy)
        rows["plclf"].append(bench.run_online(
            "plclf", head, X, y, bs, TastConfig(seed=seed)).final_accuracy)

        ext, bn_head = bench.train_source_bn(data.train_X, data.train_y, seed=seed)
        rows["none_bn"].append(bench.run_online(
            "none", (ext, bn_head), X, y, bs).final_accuracy)
        rows["tast_bn"].append(bench.run_online(
            "tast_bn", (ext, bn_head), X, y, bs,
            TastBnConfig(ns=1, steps=1, m=20, global_cap=150, seed=seed)).final_accuracy)

    print(f"{'method':10s} {'mean':>7s}  per-seed")
    for method, accs in rows.items():
        print(f"{method:10s} {np.mean(accs):7.4f}  {np.round(accs, 3)}")


if __name__ == "__main__":
    main()
