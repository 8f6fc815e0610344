import time

import numpy as np
import pytest

from latent_anomaly.diffusion import build_schedule
from latent_anomaly.synthdata import Dataset, build_world, gen_dataset

SMALL_COUNTS = {"train": 6, "val": 3, "test_in": 3, "test_out": 3}


@pytest.fixture(scope="session")
def sched():
    return build_schedule(1000, 1e-4, 0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def world():
    return build_world(seed=0)


@pytest.fixture(scope="session")
def small_world():
    return build_world(seed=3, counts=SMALL_COUNTS, height=12, width=12, region_max=3)


@pytest.fixture(scope="session")
def small_dataset(small_world, tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    gen_dataset(small_world.spec, root)
    return Dataset(root)


@pytest.fixture(scope="session")
def default_dataset(world, tmp_path_factory):
    root = tmp_path_factory.mktemp("default_ds")
    gen_dataset(world.spec, root)
    return Dataset(root)


@pytest.fixture(scope="session")
def analytic_runs(default_dataset, world, sched, tmp_path_factory):
    """Conditioned and null evaluations of the default dataset with the exact denoiser."""
    from latent_anomaly.denoiser import AnalyticDenoiser
    from latent_anomaly.evaluation import EvalConfig, evaluate

    den = AnalyticDenoiser(world.normal, sched)
    runs = {}
    for mode in ("conditioned", "null"):
        out = tmp_path_factory.mktemp(f"eval_{mode}")
        t0 = time.perf_counter()
        rep = evaluate(default_dataset, den, world, sched, EvalConfig(mode=mode), out_dir=out)
        runs[mode] = (rep, out, time.perf_counter() - t0)
    return runs
