"""Shared setup for the toy experiments: a two-condition world, its
ground-truth conditional means, and the training recipe used at toy scale."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import flowmatch as fm
from . import synthdata as sd
from .rng import Rng

# The default 1e-4 is tuned for the full-size model; the toy model needs a
# larger step to converge within a few thousand updates.
TOY_LEARNING_RATE = 1e-3
TOY_TRAIN = fm.TrainConfig(steps=2000, batch_size=16, learning_rate=TOY_LEARNING_RATE, seed=0)


def two_condition_world(sigma: float = 0.05, seed: int = 0) -> sd.World:
    """K=2 world whose two latent signatures are distinct (cosine < 0.3).
    Seeds are scanned upward from ``seed`` until that holds."""
    for s in range(seed, seed + 1000):
        world = sd.World(sd.WorldConfig(K=2, max_events=2, sigma=sigma, seed=s))
        if world.distinct(0, 1):
            return world
    raise RuntimeError("no world seed with distinct signatures found")


def two_condition_scripts() -> tuple[sd.EventScript, sd.EventScript]:
    """Condition A: one type-0 event. Condition B: the same event plus a
    type-1 event, so removing B's second event yields A."""
    first = sd.Event(0, 0.05, 0.55, 1.0)
    second = sd.Event(1, 0.45, 0.5, 1.0)
    return sd.EventScript((first,)), sd.EventScript((first, second), roi_index=1)


def two_condition_dataset(world: sd.World, n: int = 64, seed: int = 0,
                          test_fraction: float = 0.25) -> sd.BuiltDataset:
    return sd.build_dataset(world, n, seed, test_fraction, scripts=two_condition_scripts())


def condition_mean(world: sd.World, script: sd.EventScript) -> np.ndarray:
    """Noise-free latent of ``script``: ambient plus event components."""
    return sd.render_record(script, world, Rng(0)).reassemble()


@dataclass
class Recovery:
    mean_distance: float
    misassignment: float

    def passed(self, distance_tol: float = 0.15, misassign_tol: float = 0.05) -> bool:
        return self.mean_distance <= distance_tol and self.misassignment < misassign_tol


def recovery(samples: np.ndarray, means: list[np.ndarray], target: int) -> Recovery:
    """Batch-mean L2 distance to ``means[target]`` and the fraction of
    samples whose nearest mean is a different one."""
    samples = np.asarray(samples, dtype=np.float64)
    dist = float(np.linalg.norm(samples.mean(axis=0) - means[target]))
    d = np.stack([np.linalg.norm((samples - m).reshape(len(samples), -1), axis=1) for m in means])
    return Recovery(dist, float(np.mean(d.argmin(axis=0) != target)))


def train_toy(world: sd.World, records, train_cfg: fm.TrainConfig = TOY_TRAIN,
              log_stream=None) -> fm.TrainingState:
    return fm.train(world.model_config(), train_cfg, records, log_stream=log_stream)


def with_steps(train_cfg: fm.TrainConfig, steps: int) -> fm.TrainConfig:
    return dataclasses.replace(train_cfg, steps=steps)
