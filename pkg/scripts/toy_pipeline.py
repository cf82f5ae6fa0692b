"""Run the whole command-line pipeline on the default synthetic world:
data, training, the three generation stages and evaluation.

    python3 scripts/toy_pipeline.py --out runs/toy --steps 2000

Every step goes through ``foleyflow.cli.main`` exactly as the shell
commands would, so the output directory doubles as a usage example.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from foleyflow.cli import main as cli


def step(*argv) -> None:
    argv = [str(a) for a in argv]
    print("$ foleyflow " + " ".join(argv), flush=True)
    code = cli(argv)
    if code:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    common = ["--seed", args.seed, "--set", f"train.steps={args.steps}", "--set", "train.learning_rate=1e-3"]
    data = out / "dataset.ffds"
    model = ["--data", data, "--checkpoint", out / "model.ffck", *common]

    step("gen-data", "--out", out, *common)
    step("train", "--data", data, "--out", out, *common)
    step("stage1", "--out", out / "stage1", *model)
    step("stage2", "--context", out / "stage1/stage1.fft", "--out", out / "stage2", *model)
    step("stage3", "--op", "inpaint", "--span", "2:5", "--context", out / "stage2/stage2.fft",
         "--out", out / "stage3", *model)
    step("eval", "--out", out / "eval", *model)
    step("eval", "--reference", "--out", out / "eval_ref", *model)


if __name__ == "__main__":
    main()
