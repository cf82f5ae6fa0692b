"""Central finite-difference checks of the analytic gradients.

All checks run in float64: with float32 and h=1e-3 the rounding error of a
central difference (~eps/h) is itself of the order of the 1e-4 tolerance.
The checked function is reduced to a scalar with a fixed random projection,
and analytic and numerical gradients are compared norm-wise.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import mmdit
from . import tensor as T
from .rng import Rng
from .tensor import Tensor

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3
ABS_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; below ABS_FLOOR in norm, the absolute error."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff if scale < ABS_FLOOR else diff / scale


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                   h: float = 1e-3, scale_analytic: float = 1.0) -> float:
    """Max relative error over ``inputs`` of d(r . fn(inputs))/d(input)."""
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    r = Rng(seed).spawn("projection").normal(out.shape, dtype=np.float64)
    T.backward(T.sum(out * r))
    worst = 0.0
    for t, a in zip(ts, arrays):
        analytic = (t.grad if t.grad is not None else np.zeros_like(a)) * scale_analytic

        def f():
            with T.no_grad():
                return float((fn(*[Tensor(x) for x in arrays]).data * r).sum())

        numeric = numerical_grad(f, a, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _positive(rng: Rng, shape) -> np.ndarray:
    return 0.5 + rng.uniform(shape)


def _primitive_cases() -> dict[str, Callable[[Rng], tuple[Callable, list]]]:
    n = lambda rng, *shape: rng.normal(shape, dtype=np.float64)  # noqa: E731
    cases = {
        "add": lambda r: (T.add, [n(r, 3, 4), n(r, 1, 4)]),
        "sub": lambda r: (T.sub, [n(r, 3, 4), n(r, 3, 1)]),
        "mul": lambda r: (T.mul, [n(r, 2, 3, 4), n(r, 3, 4)]),
        "div": lambda r: (T.div, [n(r, 3, 4), _positive(r, (3, 4))]),
        "neg": lambda r: (T.neg, [n(r, 5)]),
        "exp": lambda r: (T.exp, [n(r, 3, 4)]),
        "sin": lambda r: (T.sin, [n(r, 3, 4)]),
        "cos": lambda r: (T.cos, [n(r, 3, 4)]),
        "tanh": lambda r: (T.tanh, [n(r, 3, 4)]),
        "sigmoid": lambda r: (T.sigmoid, [n(r, 3, 4)]),
        "silu": lambda r: (T.silu, [n(r, 3, 4)]),
        "gelu": lambda r: (T.gelu, [n(r, 3, 4)]),
        "where": lambda r: ((lambda a, b: T.where(r.spawn(1).bernoulli(0.5, (3, 4)), a, b)),
                            [n(r, 3, 4), n(r, 4)]),
        "matmul": lambda r: (T.matmul, [n(r, 2, 3, 5), n(r, 5, 4)]),
        "swapaxes": lambda r: ((lambda a: T.swapaxes(a, 0, 2)), [n(r, 2, 3, 4)]),
        "reshape": lambda r: ((lambda a: T.reshape(a, (4, 6))), [n(r, 2, 3, 4)]),
        "concat": lambda r: ((lambda a, b: T.concat([a, b], axis=1)), [n(r, 2, 3), n(r, 2, 1)]),
        "slice": lambda r: ((lambda a: T.slice_axis(a, 1, 3, axis=1)), [n(r, 2, 4, 3)]),
        "sum": lambda r: ((lambda a: T.sum(a, axis=1)), [n(r, 3, 4)]),
        "mean": lambda r: ((lambda a: T.mean(a, axis=(0, 2), keepdims=True)), [n(r, 2, 3, 4)]),
        "softmax": lambda r: (T.softmax, [n(r, 3, 5)]),
        "layer_norm": lambda r: (T.layer_norm, [n(r, 3, 6)]),
        "rope": lambda r: ((lambda a: T.rope(a, *mmdit.rope_tables(5, 4, 10.0, np.float64))),
                           [n(r, 2, 5, 4)]),
        "attention": lambda r: (T.attention, [n(r, 2, 4, 3), n(r, 2, 4, 3), n(r, 2, 4, 3)]),
        "modulated_layer_norm": lambda r: (T.modulated_layer_norm, [n(r, 4, 6), n(r, 6), n(r, 6)]),
        "linear": lambda r: (T.linear, [n(r, 3, 4), n(r, 4, 2), n(r, 2)]),
        "mse": lambda r: (T.mse, [n(r, 3, 4), n(r, 3, 4)]),
        # frequencies reach 1000 rad per unit t, so h=1e-3 would truncate badly
        "timestep_features": lambda r: ((lambda t: mmdit.timestep_features(t, 8)),
                                        [r.uniform((3,), 0.05, 0.95)], 1e-6),
    }
    return cases


PRIMITIVES = tuple(_primitive_cases())


def check_primitive(name: str, seeds: int = 20, fault: float = 1.0) -> float:
    build = _primitive_cases()[name]
    worst = 0.0
    for s in range(seeds):
        fn, inputs, *step = build(Rng(1000 + s).spawn(name))
        h = step[0] if step else 1e-3
        worst = max(worst, check_function(fn, inputs, seed=s, h=h, scale_analytic=fault))
    return worst


def perturbed_params(config: mmdit.ModelConfig, seed: int = 0, scale: float = 0.05) -> dict:
    """Initial params plus noise, so zero-initialized gates are open."""
    rng = Rng(seed).spawn("perturb")
    params = mmdit.init_params(config, seed)
    return {k: v.data.astype(np.float64) + scale * rng.normal(v.shape, dtype=np.float64)
            for k, v in params.items()}


def toy_bundle(config: mmdit.ModelConfig, seed: int = 0) -> mmdit.ConditionBundle:
    c, rng = config, Rng(seed).spawn("bundle")
    return mmdit.ConditionBundle(
        video_feats=rng.normal((c.video_len, c.video_dim)),
        sync_feats=rng.normal((c.video_len, c.sync_dim)),
        caption_emb=rng.normal((c.caption_dim,)),
        cot_tokens=rng.normal((c.text_len, c.text_dim)),
        roi_feats=rng.normal((c.video_len, c.video_dim)),
        audio_context=rng.normal((c.latent_len, c.latent_dim)),
        context_mask=rng.bernoulli(0.5, (c.latent_len,)),
    )


def check_model(config: mmdit.ModelConfig | None = None, seed: int = 0, directions: int = 8,
                h: float = 1e-3, fault: float = 1.0) -> dict[str, float]:
    """Full-model checks: gradient w.r.t. x_t entrywise, and directional
    derivatives along random directions in the whole parameter space."""
    config = config or mmdit.preset("toy")
    base = perturbed_params(config, seed)
    bundle = toy_bundle(config, seed)
    rng = Rng(seed).spawn("model-check")
    x = rng.normal((config.latent_len, config.latent_dim), dtype=np.float64)
    t = 0.37
    r = rng.normal((config.latent_len, config.latent_dim), dtype=np.float64)

    def loss_at(pvals: dict, xv: np.ndarray) -> float:
        with T.no_grad():
            p = {k: Tensor(v) for k, v in pvals.items()}
            return float((mmdit.forward(p, config, Tensor(xv), t, bundle).data * r).sum())

    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    xt = Tensor(x.copy(), requires_grad=True)
    T.backward(T.sum(mmdit.forward(params, config, xt, t, bundle) * r))
    report = {}
    numeric_x = numerical_grad(lambda: loss_at(base, x), x, h)
    report["model.x_t"] = rel_error(xt.grad * fault, numeric_x)

    analytic, numeric = [], []
    for _ in range(directions):
        u = {k: rng.normal(v.shape, dtype=np.float64) for k, v in base.items()}
        norm = math.sqrt(sum(float((d * d).sum()) for d in u.values()))
        u = {k: d / norm for k, d in u.items()}
        analytic.append(sum(float((params[k].grad * u[k]).sum()) for k in u
                            if params[k].grad is not None) * fault)
        plus = {k: base[k] + h * u[k] for k in u}
        minus = {k: base[k] - h * u[k] for k in u}
        numeric.append((loss_at(plus, x) - loss_at(minus, x)) / (2 * h))
    report["model.params_directional"] = rel_error(np.array(analytic), np.array(numeric))
    return report


@dataclass
class GradcheckRow:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {"name": self.name, "max_rel_error": self.max_rel_error,
                "tolerance": self.tolerance, "passed": self.passed}


def run_suite(config: mmdit.ModelConfig | None = None, seed: int = 0, seeds: int = 20,
              fault: str | None = None) -> tuple[list[GradcheckRow], float]:
    """Every primitive plus the full model. ``fault`` names one row whose
    analytic gradient is scaled by 1.01 (fault-injection hook for tests)."""
    start = time.perf_counter()
    rows = []
    for name in PRIMITIVES:
        err = check_primitive(name, seeds=seeds, fault=1.01 if fault == name else 1.0)
        rows.append(GradcheckRow(name, err, PRIMITIVE_TOL))
    model = check_model(config, seed=seed, fault=1.01 if fault and fault.startswith("model") else 1.0)
    rows.extend(GradcheckRow(k, v, MODEL_TOL) for k, v in model.items())
    return rows, time.perf_counter() - start
