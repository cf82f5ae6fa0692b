"""Train the toy model on the two-condition world and measure how well
guided sampling recovers each condition's mean.

    python3 scripts/conditional_recovery.py --steps 2000 --samples 200
"""
from __future__ import annotations

import argparse
import dataclasses
import time

import numpy as np

from foleyflow import experiments as ex
from foleyflow import sampler
from foleyflow.serialize import canonical_json


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--lr", type=float, default=ex.TOY_LEARNING_RATE)
    ap.add_argument("--batch", type=int, default=ex.TOY_TRAIN.batch_size)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--weights", nargs="+", type=float, default=[0.0, 1.0, 2.0, 4.0])
    ap.add_argument("--ema", action="store_true", help="sample with the EMA parameters")
    args = ap.parse_args()

    world = ex.two_condition_world()
    data = ex.two_condition_dataset(world, seed=args.seed)
    cfg = dataclasses.replace(ex.TOY_TRAIN, steps=args.steps, learning_rate=args.lr,
                              batch_size=args.batch, seed=args.seed)
    start = time.perf_counter()
    state = ex.train_toy(world, data.split("train"), cfg)
    train_s = time.perf_counter() - start
    params = state.ema if args.ema else {k: p.data for k, p in state.params.items()}
    scripts = ex.two_condition_scripts()
    means = [ex.condition_mean(world, s) for s in scripts]
    bundles = [next(r.bundle for r in data.records if r.script.events == s.sorted().events) for s in scripts]
    rows = []
    for w in args.weights:
        spec = sampler.SampleSpec(seed=args.seed, guidance=sampler.GuidanceSpec(joint_weight=w))
        for c, bundle in enumerate(bundles):
            x = sampler.sample(params, world.model_config(), bundle, spec, n=args.samples)
            r = ex.recovery(x, means, c)
            rows.append({"w": w, "condition": c, "mean_distance": round(r.mean_distance, 4),
                         "misassignment": r.misassignment})
    print(canonical_json({"train_seconds": round(train_s, 1),
                          "final_loss_median100": float(np.median(state.losses[-100:])), "rows": rows}))


if __name__ == "__main__":
    main()
