"""Command-line entry point.

Every command takes ``--config PATH`` (JSON), ``--set key.path=value``
overrides, ``--seed``, ``--out DIR`` and ``--threads``. Outputs land in
``--out`` together with a canonical-JSON sidecar embedding the full run
config. Exit codes: 0 ok, 2 usage, 3 validation, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import flowmatch as fm
from . import gradcheck
from . import metrics
from . import sampler
from . import synthdata as sd
from .config import RunConfig, load_run_config
from .errors import ContractError, FoleyFlowError, NumericError
from .mmdit import ConditionBundle
from .rng import Rng
from .serialize import canonical_json, load_tensor, save_tensor

log = logging.getLogger("foleyflow")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4
WEIGHTS = ("live", "ema")


def _write_json(path: Path, obj) -> None:
    path.write_text(canonical_json(obj) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_config(args) -> RunConfig:
    return load_run_config(args.config, args.set, args.seed)


def _dataset(path, cfg: RunConfig):
    if path is None:
        raise ContractError("--data PATH to a gen-data dataset is required")
    world_cfg, records = sd.load_dataset(path)
    cfg = dataclasses.replace(cfg, world=world_cfg)
    return cfg, sd.World(world_cfg), records


def _model(path, weights: str):
    if path is None:
        raise ContractError("--checkpoint PATH from the train command is required")
    ck = ckpt_io.load(path)
    return ck, (ck.ema if weights == "ema" else ck.params)


def _record(records, split: str, index: int):
    pool = [r for r in records if r.split == split] or records
    if not 0 <= index < len(pool):
        raise ContractError(f"--index {index} out of range: {split} split has {len(pool)} records")
    return pool[index]


def _save_latent(out: Path, name: str, x: np.ndarray, meta: dict) -> None:
    save_tensor(out / f"{name}.fft", np.asarray(x, dtype=np.float32))
    _write_json(out / f"{name}.json", meta)


# -- commands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    world = sd.World(cfg.world)
    built = sd.build_dataset(world, cfg.data.n, cfg.seed, cfg.data.test_fraction,
                             cfg.data.qc_threshold, cfg.data.scorer_seed)
    sd.save_dataset(out / "dataset.ffds", cfg.world, built.records)
    manifest = built.manifest()
    manifest["run_config"] = cfg.to_dict()
    sd.write_manifest(out / "manifest.json", manifest)
    print(canonical_json({"records": manifest["records"], "difficulty": manifest["difficulty"]}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, world, records = _dataset(args.data, _run_config(args))
    out = _out_dir(args)
    train_set = [r for r in records if r.split == "train"] or records
    config = cfg.model_config()
    state = None
    if args.resume:
        ck = ckpt_io.load(args.resume)
        if ck.config != config:
            raise ContractError("resume checkpoint was trained with a different model config")
        state = fm.TrainingState.from_checkpoint(ck)
    extra = {"run_config": cfg.to_dict()}
    mode = "a" if args.resume else "w"
    with open(out / "train_log.jsonl", mode) as logf:
        state = fm.train(config, cfg.train, train_set, state, logf,
                         out if cfg.train.checkpoint_every else None, args.until)
    ckpt_io.save(out / "model.ffck", state.to_checkpoint(config, cfg.train, extra))
    ema = ckpt_io.Checkpoint(config, dict(state.ema), dict(state.ema),
                             {"step": state.step, "seed": state.seed, "weights": "ema", **extra})
    ckpt_io.save(out / "ema.ffck", ema)
    _write_json(out / "train.json", {"step": state.step, "records": len(train_set),
                                     "dataset": _sha256(args.data), **extra})
    return EXIT_OK


def _sample_meta(cfg: RunConfig, spec, bundle, args, **extra) -> dict:
    return sampler.sidecar(spec, bundle, run_config=cfg.to_dict(), weights=args.weights,
                           checkpoint=_sha256(args.checkpoint), **extra)


def cmd_sample(args) -> int:
    cfg, world, records = _dataset(args.data, _run_config(args))
    out = _out_dir(args)
    ck, params = _model(args.checkpoint, args.weights)
    rec = _record(records, args.split, args.index)
    bundle = ConditionBundle() if args.unconditional else rec.bundle
    x = sampler.sample(params, ck.config, bundle, cfg.sample, args.n)
    _save_latent(out, "sample", x, _sample_meta(cfg, cfg.sample, bundle, args, command="sample",
                                                 index=args.index, split=args.split, n=args.n))
    return EXIT_OK


def cmd_stage1(args) -> int:
    cfg, world, records = _dataset(args.data, _run_config(args))
    out = _out_dir(args)
    ck, params = _model(args.checkpoint, args.weights)
    rec = _record(records, args.split, args.index)
    bundle = rec.bundle.without("context")
    x = sampler.sample(params, ck.config, bundle, cfg.sample)
    _save_latent(out, "stage1", x, _sample_meta(cfg, cfg.sample, bundle, args, command="stage1",
                                                 index=args.index, split=args.split))
    return EXIT_OK


def _context(path, stage: str, prior: str) -> np.ndarray:
    if path is None or not Path(path).exists():
        raise ContractError(f"{stage} needs the {prior} output: pass --context PATH "
                            f"to a {prior} latent file")
    return load_tensor(path)


def cmd_stage2(args) -> int:
    cfg, world, records = _dataset(args.data, _run_config(args))
    ctx = _context(args.context, "stage2", "stage1")
    out = _out_dir(args)
    ck, params = _model(args.checkpoint, args.weights)
    rec = _record(records, args.split, args.index)
    event = rec.script.roi_index if args.event is None else args.event
    bundle = ConditionBundle(roi_feats=sd.roi_features(world, rec.script, event), audio_context=ctx,
                             context_mask=np.ones(ctx.shape[0], dtype=bool))
    x = sampler.sample(params, ck.config, bundle, cfg.sample)
    _save_latent(out, "stage2", x, _sample_meta(cfg, cfg.sample, bundle, args, command="stage2",
                                                 index=args.index, split=args.split, event=event,
                                                 context=_sha256(args.context)))
    return EXIT_OK


def stage3_bundle(rec: sd.DatasetRecord, ctx: np.ndarray, op: str, rng: Rng, event: int | None = None,
                  span: tuple[int, int] | None = None, fraction: float | None = None) -> ConditionBundle:
    """Conditions for an edit of ``ctx``: the CoT describes the desired result."""
    ctx = np.asarray(ctx, dtype=np.float32)
    L = ctx.shape[0]
    cot = rec.bundle.cot_tokens
    if op in ("inpaint", "extend"):
        ex = fm.mask_audio_context(ctx, op, rng, span=span, fraction=fraction)
        ctx, mask = ex.audio_context, ex.context_mask
    elif op in ("add", "remove"):
        mask = np.ones(L, dtype=bool)
        if op == "remove":
            j = rec.script.roi_index if event is None else event
            if not 0 <= j < rec.n_events:
                raise ContractError(f"event index {j} out of range for {rec.n_events} events")
            cot = rec.cot_without(j)
    else:
        raise ContractError(f"unknown editing operation {op!r}")
    return dataclasses.replace(rec.bundle, cot_tokens=cot, audio_context=ctx, context_mask=mask)


def _span(text: str | None):
    if text is None:
        return None
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise ContractError(f"--span must look like START:STOP, got {text!r}") from None


def cmd_stage3(args) -> int:
    cfg, world, records = _dataset(args.data, _run_config(args))
    ctx = _context(args.context, "stage3", "stage1 or stage2")
    out = _out_dir(args)
    ck, params = _model(args.checkpoint, args.weights)
    rec = _record(records, args.split, args.index)
    bundle = stage3_bundle(rec, ctx, args.op, Rng(cfg.sample.seed).spawn("stage3-mask"),
                           args.event, _span(args.span), args.fraction)
    x = sampler.edit_sample(params, ck.config, bundle, args.op, cfg.sample)
    _save_latent(out, "stage3", x, _sample_meta(cfg, cfg.sample, bundle, args, command="stage3",
                                                 op=args.op, index=args.index, split=args.split,
                                                 event=args.event, context=_sha256(args.context)))
    return EXIT_OK


def eval_seed(seed: int, index: int) -> int:
    return Rng(seed).spawn(f"eval-{index}").seed


def generate_for_eval(params, config, records, spec: sampler.SampleSpec) -> list[np.ndarray]:
    """One clip per record, record i drawn with its own fixed seed."""
    return [sampler.sample(params, config, r.bundle, dataclasses.replace(spec, seed=eval_seed(spec.seed, i)))
            for i, r in enumerate(records)]


def cmd_eval(args) -> int:
    cfg, world, records = _dataset(args.data, _run_config(args))
    out = _out_dir(args)
    refs = [r for r in records if r.split == args.split]
    if not refs:
        raise ContractError(f"dataset has no {args.split!r} records")
    extra = {"run_config": cfg.to_dict(), "split": args.split}
    if args.reference:
        generated = [r.x1 for r in refs]
        extra["generated"] = "reference"
    else:
        ck, params = _model(args.checkpoint, args.weights)
        generated = generate_for_eval(params, ck.config, refs, cfg.sample)
        extra.update(checkpoint=_sha256(args.checkpoint), weights=args.weights)
    suite = world.scorer_suite(cfg.metrics.suite_seed)
    report = metrics.evaluate(generated, refs, suite, cfg.metrics.protocol(args.threads), extra)
    (out / "report.json").write_text(report.to_json() + "\n")
    print(canonical_json({k: getattr(report, k) for k in ("fd", "fd_stereo", "kl", "clap", "clap_cap", "desync")}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    rows, seconds = gradcheck.run_suite(cfg.model_config(), seed=cfg.seed, fault=args.fault)
    table = {"rows": [r.to_dict() for r in rows], "seconds": round(seconds, 3),
             "passed": all(r.passed for r in rows)}
    text = json.dumps(table, sort_keys=True, indent=1)
    print(text)
    if args.out:
        (_out_dir(args) / "gradcheck.json").write_text(text + "\n")
    return EXIT_OK if table["passed"] else EXIT_NUMERIC


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry by dotted path, e.g. train.steps=100")
    common.add_argument("--seed", type=int, help="reseed world, training and sampling")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for eval scoring")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--data", help="dataset file written by gen-data")
    model.add_argument("--checkpoint", help="checkpoint written by train")
    model.add_argument("--weights", choices=WEIGHTS, default="live",
                       help="which parameter set of the checkpoint to sample with")
    model.add_argument("--split", default="test")
    model.add_argument("--index", type=int, default=0, help="record index within the split")

    p = argparse.ArgumentParser(prog="foleyflow", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="render, QC and label a synthetic dataset")

    t = sub.add_parser("train", parents=[common], help="flow-matching training")
    t.add_argument("--data", help="dataset file written by gen-data")
    t.add_argument("--resume", help="checkpoint (with optimizer state) to continue from")
    t.add_argument("--until", type=int, help="stop after this step (default: train.steps)")

    s = sub.add_parser("sample", parents=[common, model], help="sample latents for one record")
    s.add_argument("--n", type=int, help="number of samples (batched)")
    s.add_argument("--unconditional", action="store_true")

    sub.add_parser("stage1", parents=[common, model], help="CoT-guided generation")
    s2 = sub.add_parser("stage2", parents=[common, model], help="ROI refinement over a stage1 output")
    s2.add_argument("--context", help="stage1 latent file")
    s2.add_argument("--event", type=int, help="event index selecting the ROI (default: record's ROI)")
    s3 = sub.add_parser("stage3", parents=[common, model], help="editing: inpaint/extend/add/remove")
    s3.add_argument("--context", help="stage1/stage2 latent file to edit")
    s3.add_argument("--op", choices=fm.EDIT_OPS, required=True)
    s3.add_argument("--event", type=int, help="event to remove (default: record's ROI event)")
    s3.add_argument("--span", help="inpaint hole START:STOP in frames")
    s3.add_argument("--fraction", type=float, help="extend: fraction of trailing frames to generate")

    e = sub.add_parser("eval", parents=[common, model], help="sample the split and score it")
    e.add_argument("--reference", action="store_true", help="score the references against themselves")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--fault", help=argparse.SUPPRESS)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "stage1": cmd_stage1,
            "stage2": cmd_stage2, "stage3": cmd_stage3, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FoleyFlowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
