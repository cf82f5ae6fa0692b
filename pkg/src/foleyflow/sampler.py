"""ODE sampling from a trained velocity field, with guidance and editing.

Integration runs from t=0 (noise) to t=1 (data) with a fixed step. The
conditional and unconditional branches are always separate forward calls
on identically shaped inputs, so the w=0 and w=1 degenerate cases are
bit-identical to plain unconditional / conditional integration.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import mmdit
from . import tensor as T
from .errors import ConfigError, ContractError, DomainError, NumericError
from .flowmatch import EDIT_OPS, interpolate
from .mmdit import MODALITIES, ConditionBundle, ModelConfig
from .rng import Rng
from .tensor import Tensor

SOLVERS = ("euler", "midpoint")
GUIDANCE_MODES = ("joint", "compositional")

VelocityFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class GuidanceSpec:
    """``joint``: v0 + w (vc - v0). ``compositional``: v0 + sum_m w_m (v_m - v0),
    where v_m sees modality m alone. Each mode ignores the other's weights."""

    mode: str = "joint"
    joint_weight: float = 1.0
    per_modality_weights: Mapping[str, float] = field(default_factory=dict)

    def validate(self) -> "GuidanceSpec":
        if self.mode not in GUIDANCE_MODES:
            raise ConfigError(f"guidance.mode must be one of {GUIDANCE_MODES}, got {self.mode!r}")
        if self.joint_weight < 0:
            raise DomainError(f"guidance weight must be >= 0, got {self.joint_weight}")
        for m, w in self.per_modality_weights.items():
            if m not in MODALITIES:
                raise ConfigError(f"unknown guidance modality {m!r}")
            if w < 0:
                raise DomainError(f"guidance weight for {m} must be >= 0, got {w}")
        return self

    def to_dict(self) -> dict:
        return {"mode": self.mode, "joint_weight": self.joint_weight,
                "per_modality_weights": dict(sorted(self.per_modality_weights.items()))}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GuidanceSpec":
        return cls(d.get("mode", "joint"), float(d.get("joint_weight", 1.0)),
                   dict(d.get("per_modality_weights", {}))).validate()


@dataclass(frozen=True)
class SampleSpec:
    steps: int = 24
    solver: str = "euler"
    seed: int = 0
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)

    def validate(self) -> "SampleSpec":
        if self.steps < 1:
            raise ConfigError(f"sample.steps must be >= 1, got {self.steps}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"sample.solver must be one of {SOLVERS}, got {self.solver!r}")
        self.guidance.validate()
        return self

    def to_dict(self) -> dict:
        return {"steps": self.steps, "solver": self.solver, "seed": self.seed,
                "guidance": self.guidance.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SampleSpec":
        g = d.get("guidance", {})
        return cls(int(d.get("steps", 24)), d.get("solver", "euler"), int(d.get("seed", 0)),
                   g if isinstance(g, GuidanceSpec) else GuidanceSpec.from_dict(g)).validate()


def _frozen(params) -> dict:
    return {k: v if isinstance(v, Tensor) else Tensor(np.asarray(v)) for k, v in params.items()}


def _forward(params, config: ModelConfig, x: np.ndarray, t: float, bundle: ConditionBundle) -> np.ndarray:
    with T.no_grad():
        return mmdit.forward(params, config, Tensor(x), t, bundle).data


def guided_velocity(params, config: ModelConfig, x, t: float, bundle: ConditionBundle,
                    g: GuidanceSpec) -> np.ndarray:
    g.validate()
    if not 0 <= t <= 1:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    params = _frozen(params)
    x = np.asarray(x, dtype=np.float32)
    if g.mode == "compositional":
        terms = [(m, w) for m, w in sorted(g.per_modality_weights.items()) if w != 0]
        if not terms:
            return _forward(params, config, x, t, bundle.empty())
        if len(terms) == 1:
            m, w = terms[0]
            return guided_velocity(params, config, x, t, bundle.only(m), GuidanceSpec("joint", w))
        v0 = _forward(params, config, x, t, bundle.empty())
        out = v0.copy()
        for m, w in terms:
            out += np.float32(w) * (_forward(params, config, x, t, bundle.only(m)) - v0)
        return out
    w = g.joint_weight
    if w == 1:
        return _forward(params, config, x, t, bundle)
    v0 = _forward(params, config, x, t, bundle.empty())
    if w == 0:
        return v0
    return v0 + np.float32(w) * (_forward(params, config, x, t, bundle) - v0)


def integrate(velocity: VelocityFn, x0, steps: int, solver: str = "euler",
              project: Callable[[np.ndarray, float], np.ndarray] | None = None) -> np.ndarray:
    """Fixed-step integration of dx/dt = velocity(x, t) over [0, 1].

    ``project(x, t)`` runs after every step (used for known-region replacement).
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if solver not in SOLVERS:
        raise ConfigError(f"solver must be one of {SOLVERS}, got {solver!r}")
    x = np.array(x0, dtype=np.float32)
    dt = np.float32(1.0 / steps)
    for k in range(steps):
        t = k / steps
        if solver == "euler":
            x = x + dt * velocity(x, t)
        else:
            mid = x + (dt / 2) * velocity(x, t)
            x = x + dt * velocity(mid, t + 0.5 / steps)
        if project is not None:
            x = project(x, (k + 1) / steps)
        bad = T.first_nonfinite(x)
        if bad is not None:
            raise NumericError(f"non-finite sampler state at step {k} (index {bad})")
    return x


def initial_noise(config: ModelConfig, seed: int, n: int | None = None) -> np.ndarray:
    shape = (config.latent_len, config.latent_dim)
    return Rng(seed).spawn("sample-noise").normal(shape if n is None else (n,) + shape)


def sample(params, config: ModelConfig, bundle: ConditionBundle, spec: SampleSpec,
           n: int | None = None) -> np.ndarray:
    """Draw x0 from ``spec.seed`` and integrate to t=1. With ``n`` the result
    is a batch of ``n`` samples sharing the bundle."""
    spec.validate()
    params = _frozen(params)
    field_ = lambda x, t: guided_velocity(params, config, x, t, bundle, spec.guidance)  # noqa: E731
    return integrate(field_, initial_noise(config, spec.seed, n), spec.steps, spec.solver)


def edit_sample(params, config: ModelConfig, bundle: ConditionBundle, op_kind: str,
                spec: SampleSpec, n: int | None = None) -> np.ndarray:
    """Sample with the audio context as a condition. inpaint/extend also pin
    the known frames to the noisy path of the context after every step and
    to the context itself at the end."""
    spec.validate()
    if op_kind not in EDIT_OPS:
        raise ContractError(f"unknown editing operation {op_kind!r}; expected one of {EDIT_OPS}")
    if bundle.audio_context is None:
        raise ContractError(f"{op_kind} needs audio_context and context_mask in the bundle")
    params = _frozen(params)
    x0 = initial_noise(config, spec.seed, n)
    field_ = lambda x, t: guided_velocity(params, config, x, t, bundle, spec.guidance)  # noqa: E731
    if op_kind in ("add", "remove"):
        return integrate(field_, x0, spec.steps, spec.solver)
    ctx = np.asarray(bundle.audio_context, dtype=np.float32)
    known = np.asarray(bundle.context_mask, dtype=bool)[:, None]

    def project(x, t):
        return np.where(known, interpolate(x0, np.broadcast_to(ctx, x0.shape), t), x).astype(np.float32)

    x = integrate(field_, x0, spec.steps, spec.solver, project)
    return np.where(known, ctx, x).astype(np.float32)


def sidecar(spec: SampleSpec, bundle: ConditionBundle, **extra) -> dict:
    out = {"seed": spec.seed, "steps": spec.steps, "solver": spec.solver,
           "guidance": spec.guidance.to_dict(), "bundle_fingerprint": bundle.fingerprint()}
    out.update(extra)
    return out


def with_guidance(spec: SampleSpec, **changes) -> SampleSpec:
    return dataclasses.replace(spec, guidance=dataclasses.replace(spec.guidance, **changes))
