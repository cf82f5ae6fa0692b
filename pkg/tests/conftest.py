import time

import numpy as np
import pytest

from foleyflow import experiments as ex
from foleyflow import mmdit


@pytest.fixture(scope="session")
def two_cond():
    world = ex.two_condition_world()
    return world, ex.two_condition_dataset(world)


@pytest.fixture(scope="session")
def trained(two_cond):
    """Toy model trained 2,000 steps on the two-condition world (shared by
    the slow tests; about two minutes on one core)."""
    world, data = two_cond
    start = time.perf_counter()
    state = ex.train_toy(world, data.split("train"))
    state.train_seconds = time.perf_counter() - start
    return state


@pytest.fixture(scope="session")
def trained_params(trained):
    return {k: p.data for k, p in trained.params.items()}


@pytest.fixture(scope="session")
def untrained_params(two_cond):
    world, _ = two_cond
    return {k: p.data for k, p in mmdit.init_params(world.model_config(), ex.TOY_TRAIN.seed).items()}


@pytest.fixture(scope="session")
def condition_means(two_cond):
    world, _ = two_cond
    return [ex.condition_mean(world, s) for s in ex.two_condition_scripts()]


@pytest.fixture(scope="session")
def condition_records(two_cond):
    """One test record per condition (A: one event, B: two events)."""
    _, data = two_cond
    test = data.split("test")
    return [next(r for r in test if r.n_events == n) for n in (1, 2)]


def assert_bits_equal(a, b):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape and a.tobytes() == b.tobytes()
