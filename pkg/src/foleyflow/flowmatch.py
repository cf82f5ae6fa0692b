"""Conditional flow-matching training on the straight (rectified) path.

Each step draws, per batch element, ``t ~ U[0, 1)`` and ``x0 ~ N(0, I)``,
optionally turns the record into an editing example (inpaint / extend /
add / remove), drops condition units independently with ``p_drop``, and
regresses the model output onto ``target - x0``.

Randomness for step ``k`` comes from ``Rng(seed).spawn(k)``, so resuming
from a checkpoint at step ``k`` replays exactly the same draws.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import mmdit
from . import tensor as T
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .mmdit import ConditionBundle, ModelConfig
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

EDIT_OPS = ("inpaint", "extend", "add", "remove")
DROP_UNITS = ("video", "caption", "cot", "roi", "context")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    p_drop: float = 0.2
    ema_decay: float = 0.999
    context_task_fraction: float = 0.5
    finetune: bool = False
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("train.learning_rate and train.weight_decay must be non-negative")
        if not 0 <= self.p_drop < 1:
            raise ConfigError(f"train.p_drop must lie in [0, 1), got {self.p_drop}")
        if not 0 < self.ema_decay < 1:
            raise ConfigError(f"train.ema_decay must lie in (0, 1), got {self.ema_decay}")
        if not 0 <= self.context_task_fraction <= 1:
            raise ConfigError("train.context_task_fraction must lie in [0, 1]")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"train.adam_betas must lie in [0, 1), got {self.adam_betas}")
        return self

    @property
    def edit_fraction(self) -> float:
        return 1.0 if self.finetune else self.context_task_fraction

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config key(s): {sorted(unknown)}")
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d).validate()


# -- path and targets ------------------------------------------------------


def interpolate(x0, x1, t: float) -> np.ndarray:
    """x_t = (1 - t) x0 + t x1."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate shape mismatch: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=x0.dtype)
    if np.any(t < 0) or np.any(t > 1):
        raise ContractError(f"t must lie in [0, 1], got {t}")
    return (1 - t) * x0 + t * x1


def target_velocity(x0, x1) -> np.ndarray:
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeError(f"target_velocity shape mismatch: {x0.shape} vs {x1.shape}")
    return x1 - x0


def dropout_conditions(bundle: ConditionBundle, p_drop: float, rng: Rng) -> ConditionBundle:
    """Independently mark each condition unit absent with probability ``p_drop``.

    Video and sync drop together, as do audio context and its mask. Always
    consumes one draw per unit so the stream position does not depend on
    which units are present.
    """
    drops = rng.uniform((len(DROP_UNITS),)) < p_drop
    units = [u for u, d in zip(DROP_UNITS, drops) if d]
    return bundle.without(*units) if units else bundle


@dataclass
class EditExample:
    audio_context: np.ndarray
    context_mask: np.ndarray
    target: np.ndarray
    op: str
    event_index: int | None = None


def mask_audio_context(x1, op_kind: str, rng: Rng, components: Sequence[np.ndarray] | None = None,
                       span: tuple[int, int] | None = None, fraction: float | None = None,
                       event_index: int | None = None) -> EditExample:
    """Build a self-supervised editing example from a clean latent.

    ``span`` (inpaint) and ``fraction`` (extend) pin the hidden region;
    otherwise it is drawn from ``rng``. add/remove need the per-event
    ``components`` of ``x1``.
    """
    x1 = np.asarray(x1, dtype=np.float32)
    L = x1.shape[0]
    if L < 4:
        raise ContractError(f"editing examples need at least 4 frames, got {L}")
    if op_kind == "inpaint":
        if span is None:
            n = int(np.clip(round(rng.uniform((), 0.2, 0.6) * L), 1, L - 2))
            start = 1 + int(rng.integers(L - 1 - n))
            span = (start, start + n)
        a, b = span
        if not (1 <= a < b <= L - 1):
            raise ContractError(f"inpaint span {span} must be an interior range of 0..{L}")
        mask = np.ones(L, dtype=bool)
        mask[a:b] = False
        return EditExample(np.where(mask[:, None], x1, 0).astype(np.float32), mask, x1.copy(), op_kind)
    if op_kind == "extend":
        frac = rng.uniform((), 0.3, 0.6) if fraction is None else fraction
        n = int(round(frac * L))
        if not 1 <= n <= L - 1:
            raise ContractError(f"extend fraction {frac} hides {n} of {L} frames")
        mask = np.ones(L, dtype=bool)
        mask[L - n:] = False
        return EditExample(np.where(mask[:, None], x1, 0).astype(np.float32), mask, x1.copy(), op_kind)
    if op_kind in ("add", "remove"):
        if not components:
            raise ContractError(f"{op_kind} needs the latent's event components")
        j = int(rng.integers(len(components))) if event_index is None else event_index
        without = (x1 - components[j]).astype(np.float32)
        mask = np.ones(L, dtype=bool)
        if op_kind == "add":
            return EditExample(without, mask, x1.copy(), op_kind, j)
        return EditExample(x1.copy(), mask, without, op_kind, j)
    raise ContractError(f"unknown editing operation {op_kind!r}")


def training_example(record, train_cfg: TrainConfig, rng: Rng) -> tuple[ConditionBundle, np.ndarray]:
    """Conditions and regression target for one record (before noise)."""
    bundle, target = record.bundle, np.asarray(record.x1, dtype=np.float32)
    if rng.uniform() < train_cfg.edit_fraction:
        op = EDIT_OPS[int(rng.integers(len(EDIT_OPS)))]
        ex = mask_audio_context(target, op, rng, record.event_components)
        changes = {"audio_context": ex.audio_context, "context_mask": ex.context_mask}
        if op == "remove":
            changes["cot_tokens"] = record.cot_without(ex.event_index)
        bundle = dataclasses.replace(bundle, **changes)
        target = ex.target
    return dropout_conditions(bundle, train_cfg.p_drop, rng), target


ModelFn = Callable[..., Tensor]


def cfm_loss(params, config: ModelConfig, records, train_cfg: TrainConfig, rng: Rng,
             model_fn: ModelFn = mmdit.forward) -> tuple[Tensor, dict]:
    """Mean squared velocity error over a batch of records.

    Returns the scalar loss node and the sampled batch (``x0``, ``t``,
    ``x_t``, ``target``, ``velocity``, ``bundles``).
    """
    records = list(records) if isinstance(records, (list, tuple)) else [records]
    x0s, ts, xts, vs, targets, bundles = [], [], [], [], [], []
    for b, rec in enumerate(records):
        r = rng.spawn(b)
        t = float(r.uniform())
        x0 = r.normal(np.shape(rec.x1))
        bundle, target = training_example(rec, train_cfg, r)
        x0s.append(x0), ts.append(t), bundles.append(bundle), targets.append(target)
        xts.append(interpolate(x0, target, t)), vs.append(target_velocity(x0, target))
    x_t = np.stack(xts).astype(np.float32)
    v = np.stack(vs).astype(np.float32)
    t_arr = np.array(ts, dtype=np.float32)
    pred = model_fn(params, config, Tensor(x_t), t_arr, bundles)
    loss = T.mse(pred, Tensor(v))
    batch = {"x0": np.stack(x0s), "t": t_arr, "x_t": x_t, "target": np.stack(targets),
             "velocity": v, "bundles": bundles}
    return loss, batch


# -- optimizer and state ---------------------------------------------------


@dataclass
class TrainingState:
    params: dict[str, Tensor]
    ema: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    losses: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, config: ModelConfig, seed: int) -> "TrainingState":
        params = mmdit.init_params(config, seed)
        return cls(params, {k: p.data.copy() for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0, seed)

    def to_checkpoint(self, config: ModelConfig, train_cfg: TrainConfig | None = None,
                      extra: dict | None = None) -> ckpt_io.Checkpoint:
        meta = {"step": self.step, "seed": self.seed}
        if train_cfg is not None:
            meta["train"] = train_cfg.to_dict()
        if extra:
            meta.update(extra)
        opt = {f"m.{k}": a for k, a in self.m.items()}
        opt.update({f"v.{k}": a for k, a in self.v.items()})
        return ckpt_io.Checkpoint(config, {k: p.data for k, p in self.params.items()}, self.ema, meta, opt)

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint) -> "TrainingState":
        if ck.optimizer is None:
            raise ContractError("checkpoint has no optimizer state; cannot resume training")
        params = {k: Tensor(a.copy(), requires_grad=True) for k, a in ck.params.items()}
        m = {k: ck.optimizer[f"m.{k}"].copy() for k in params}
        v = {k: ck.optimizer[f"v.{k}"].copy() for k in params}
        return cls(params, {k: a.copy() for k, a in ck.ema.items()}, m, v,
                   int(ck.meta["step"]), int(ck.meta.get("seed", 0)))


def adamw_step(state: TrainingState, grads: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    """Decoupled weight decay, then a bias-corrected Adam update (in place)."""
    b1, b2 = cfg.adam_betas
    k = state.step + 1
    lr = np.float32(cfg.learning_rate)
    c1, c2 = 1 - b1 ** k, 1 - b2 ** k
    decay = np.float32(1 - cfg.learning_rate * cfg.weight_decay)
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = g.astype(np.float32, copy=False)
        m, v = state.m[name], state.v[name]
        m *= np.float32(b1)
        m += np.float32(1 - b1) * g
        v *= np.float32(b2)
        v += np.float32(1 - b2) * (g * g)
        update = (m / np.float32(c1)) / (np.sqrt(v / np.float32(c2)) + np.float32(cfg.adam_eps))
        p.data = p.data * decay - lr * update


def ema_update(state: TrainingState, decay: float) -> None:
    d = np.float32(decay)
    for name, p in state.params.items():
        e = state.ema[name]
        e *= d
        e += (np.float32(1) - d) * p.data


def _first_bad_param(state: TrainingState, grads: dict) -> str:
    for name, p in state.params.items():
        if T.first_nonfinite(p.data) is not None:
            return f"{name} (value)"
        g = grads.get(name)
        if g is not None and T.first_nonfinite(g) is not None:
            return f"{name} (gradient)"
    return "<none: loss itself>"


def train_step(state: TrainingState, config: ModelConfig, train_cfg: TrainConfig,
               dataset: Sequence, model_fn: ModelFn = mmdit.forward) -> dict:
    rng = Rng(train_cfg.seed).spawn(state.step)
    idx = rng.integers(len(dataset), (train_cfg.batch_size,))
    loss, _ = cfm_loss(state.params, config, [dataset[i] for i in idx], train_cfg,
                       rng.spawn("loss"), model_fn)
    T.backward(loss)
    grads = {k: p.grad for k, p in state.params.items() if p.grad is not None}
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {state.step}; "
                           f"offending parameter: {_first_bad_param(state, grads)}")
    grad_norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    adamw_step(state, grads, train_cfg)
    for p in state.params.values():
        p.grad = None
    ema_update(state, train_cfg.ema_decay)
    state.step += 1
    state.losses.append(value)
    return {"step": state.step, "loss": value, "grad_norm": grad_norm}


def train(config: ModelConfig, train_cfg: TrainConfig, dataset: Sequence,
          state: TrainingState | None = None, log_stream=None, checkpoint_dir=None,
          until: int | None = None, model_fn: ModelFn = mmdit.forward) -> TrainingState:
    """Run steps ``state.step .. until`` (default ``train_cfg.steps``).

    Emits one JSON line per step to ``log_stream``; writes
    ``ckpt_<step>.ffck`` into ``checkpoint_dir`` every ``checkpoint_every``
    steps.
    """
    config.validate()
    train_cfg.validate()
    if not len(dataset):
        raise ContractError("training needs a non-empty dataset")
    state = state or TrainingState.fresh(config, train_cfg.seed)
    until = train_cfg.steps if until is None else until
    while state.step < until:
        start = time.perf_counter()
        row = train_step(state, config, train_cfg, dataset, model_fn)
        row["wall_ms"] = round((time.perf_counter() - start) * 1000, 3)
        if log_stream is not None:
            log_stream.write(json.dumps(row) + "\n")
        if state.step % 100 == 0:
            log.info("step %d loss %.5f", state.step, row["loss"])
        if checkpoint_dir and train_cfg.checkpoint_every and state.step % train_cfg.checkpoint_every == 0:
            ckpt_io.save(Path(checkpoint_dir) / f"ckpt_{state.step:06d}.ffck",
                         state.to_checkpoint(config, train_cfg))
    return state


def strip_wall_clock(log_lines: Sequence[str]) -> list[dict]:
    """Parsed log rows without the timing field, for determinism comparisons."""
    rows = []
    for line in log_lines:
        if line.strip():
            row = json.loads(line)
            row.pop("wall_ms", None)
            rows.append(row)
    return rows
