#!/usr/bin/env python3
"""Temperature / adapter-width sensitivity table on the default benchmark.

Usage: python scripts/sensitivity.py [--seeds 0 1 2 3 4]
"""

import argparse

import numpy as np

from tast import bench
from tast.engine import TastConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--taus", type=float, nargs="+", default=[0.01, 0.1, 1.0])
    ap.add_argument("--d-phis", type=int, nargs="+", default=[16, 8, 4])
    args = ap.parse_args()

    cache = {}
    for seed in args.seeds:
        spec = bench.SyntheticSpec(mean_radius=3.0, shift=bench.MeanShift(scale=6.4), seed=seed)
        data = bench.generate(spec)
        cache[seed] = (data, bench.train_source_head(data.train_X, data.train_y))

    print(f"{'tau':>8s} " + " ".join(f"d_phi={d:<4d}" for d in args.d_phis))
    for tau in args.taus:
        vals = []
        for d_phi in args.d_phis:
            accs = []
            for seed in args.seeds:
                data, head = cache[seed]
                cfg = TastConfig(ne=20, ns=4, steps=1, m=100, tau=tau, d_phi=d_phi, seed=seed)
                accs.append(bench.run_online("tast", head, data.test_X, data.test_y, 32, cfg).final_accuracy)
            vals.append(np.mean(accs))
        print(f"{tau:8.3f} " + " ".join(f"{v:9.4f} " for v in vals))


if __name__ == "__main__":
    main()
