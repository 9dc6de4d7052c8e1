import numpy as np
import pytest

from tast import bench

BENCH_SEEDS = (0, 1, 2, 3, 4)


def default_shift_spec(seed: int) -> bench.SyntheticSpec:
    """The calibrated benchmark: radius-3 means (source head > 0.9), mean
    shift of 6.4 covariance units (unadapted lands in the 0.5-0.8 band)."""
    return bench.SyntheticSpec(mean_radius=3.0, shift=bench.MeanShift(scale=6.4), seed=seed)


@pytest.fixture(scope="session")
def shift_benchmarks():
    """(data, head) per seed for the default mean-shift benchmark."""
    out = {}
    for seed in BENCH_SEEDS:
        data = bench.generate(default_shift_spec(seed))
        head = bench.train_source_head(data.train_X, data.train_y)
        out[seed] = (data, head)
    return out


@pytest.fixture(scope="session")
def bn_benchmarks():
    """(data, extractor, head) per seed for the toy-BN mean-shift stream."""
    out = {}
    for seed in BENCH_SEEDS:
        data = bench.generate(default_shift_spec(seed))
        ext, head = bench.train_source_bn(data.train_X, data.train_y, seed=seed)
        out[seed] = (data, ext, head)
    return out


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
