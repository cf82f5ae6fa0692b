"""Multimodal diffusion transformer that predicts a flow velocity.

Data path for a batch of noisy latents ``x_t`` (B x latent_len x latent_dim):

1. input projection of ``[x_t ; context channels ; mask indicator]``
2. global condition ``c_g`` = projected caption + time-pooled video + time-pooled
   sync features + timestep embedding
3. ``multistream_layers`` blocks over three token streams (audio, video, CoT
   text) with per-stream weights and one joint attention
4. gated fusion of the upsampled video stream into the audio stream
5. ``singlestream_layers`` AdaLN blocks over the fused audio tokens
6. AdaLN output head back to ``latent_dim``

Absent conditions are replaced by learned null vectors living in each
modality's own feature space, so "absent" and "explicitly set to the null
vector" run through identical arithmetic.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DomainError, ShapeError
from .rng import Rng
from .serialize import tensor_bytes
from .tensor import Tensor

Params = dict[str, Tensor]

MODALITIES = ("video", "caption", "cot", "roi", "context")


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 64
    heads: int = 4
    multistream_layers: int = 2
    singlestream_layers: int = 1
    latent_dim: int = 4
    latent_len: int = 8
    video_dim: int = 8
    text_dim: int = 8
    caption_dim: int = 8
    sync_dim: int = 4
    video_len: int = 4
    text_len: int = 3
    mlp_ratio: float = 4.0
    freq_dim: int = 32
    upsample: str = "linear"
    rope_base: float = 100.0

    @property
    def depth(self) -> int:
        return self.multistream_layers + self.singlestream_layers

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.hidden_size * self.mlp_ratio))

    def validate(self) -> "ModelConfig":
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in ("upsample", "rope_base", "mlp_ratio"):
                continue
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.hidden_size % self.heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary positions")
        if self.freq_dim % 2:
            raise ConfigError(f"freq_dim {self.freq_dim} must be even")
        if self.video_len > self.latent_len:
            raise ConfigError(f"video_len {self.video_len} exceeds latent_len {self.latent_len}; "
                              "fusion only upsamples")
        if self.mlp_ratio <= 0 or self.mlp_hidden < 1:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.upsample not in ("linear", "nearest"):
            raise ConfigError(f"upsample must be 'linear' or 'nearest', got {self.upsample!r}")
        if not self.rope_base > 1:
            raise ConfigError(f"rope_base must exceed 1, got {self.rope_base}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d).validate()


# Published model scales; feature widths follow the usual encoder sizes
# (CLIP 1024, T5-xl 2048, Synchformer 768) and are not part of the table.
_SCALE = dict(latent_dim=64, latent_len=194, video_dim=1024, text_dim=2048,
              caption_dim=1024, sync_dim=768, video_len=72, text_len=128, freq_dim=256,
              rope_base=10000.0)
PRESETS: dict[str, ModelConfig] = {
    "large": ModelConfig(hidden_size=1024, heads=16, multistream_layers=14, singlestream_layers=7, **_SCALE),
    "medium": ModelConfig(hidden_size=768, heads=12, multistream_layers=14, singlestream_layers=7, **_SCALE),
    "small": ModelConfig(hidden_size=512, heads=8, multistream_layers=12, singlestream_layers=6, **_SCALE),
    "toy": ModelConfig(),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- conditions ------------------------------------------------------------


@dataclass(frozen=True)
class ConditionBundle:
    """Conditioning signals for one clip. ``None`` marks a modality absent."""

    video_feats: np.ndarray | None = None
    caption_emb: np.ndarray | None = None
    cot_tokens: np.ndarray | None = None
    sync_feats: np.ndarray | None = None
    roi_feats: np.ndarray | None = None
    audio_context: np.ndarray | None = None
    context_mask: np.ndarray | None = None

    def __post_init__(self):
        if (self.audio_context is None) != (self.context_mask is None):
            raise ContractError("context_mask must be present exactly when audio_context is")
        if (self.video_feats is None) != (self.sync_feats is None):
            raise ContractError("video_feats and sync_feats are present or absent together")
        if self.context_mask is not None:
            object.__setattr__(self, "context_mask", np.asarray(self.context_mask, dtype=bool))

    def present(self, unit: str) -> bool:
        return getattr(self, _UNIT_FIELDS[unit][0]) is not None

    def without(self, *units: str) -> "ConditionBundle":
        """Copy with the given modality units marked absent."""
        changes = {}
        for u in units:
            for f in _UNIT_FIELDS[u]:
                changes[f] = None
        return dataclasses.replace(self, **changes)

    def only(self, *units: str) -> "ConditionBundle":
        return self.without(*[u for u in MODALITIES if u not in units])

    def empty(self) -> "ConditionBundle":
        return ConditionBundle()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            h.update(f.name.encode())
            if v is None:
                h.update(b"\0")
            else:
                h.update(b"\1" + tensor_bytes(np.asarray(v, dtype=np.float32)))
        return h.hexdigest()


_UNIT_FIELDS = {
    "video": ("video_feats", "sync_feats"),
    "caption": ("caption_emb",),
    "cot": ("cot_tokens",),
    "roi": ("roi_feats",),
    "context": ("audio_context", "context_mask"),
}


@dataclass
class BatchBundle:
    """Stacked conditions; absent entries are zero-filled and flagged."""

    video_feats: np.ndarray
    sync_feats: np.ndarray
    caption_emb: np.ndarray
    cot_tokens: np.ndarray
    roi_feats: np.ndarray
    audio_context: np.ndarray
    context_mask: np.ndarray
    present: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.caption_emb.shape[0]


def collate(bundles: Sequence[ConditionBundle], config: ModelConfig) -> BatchBundle:
    c = config
    B = len(bundles)
    specs = {
        "video_feats": (c.video_len, c.video_dim),
        "sync_feats": (c.video_len, c.sync_dim),
        "caption_emb": (c.caption_dim,),
        "cot_tokens": (c.text_len, c.text_dim),
        "roi_feats": (c.video_len, c.video_dim),
        "audio_context": (c.latent_len, c.latent_dim),
        "context_mask": (c.latent_len,),
    }
    arrays = {}
    for name, shape in specs.items():
        dtype = bool if name == "context_mask" else np.float32
        arr = np.zeros((B,) + shape, dtype=dtype)
        for b, bundle in enumerate(bundles):
            v = getattr(bundle, name)
            if v is None:
                continue
            v = np.asarray(v)
            if v.shape != shape:
                raise ShapeError(f"{name} has shape {v.shape}, model expects {shape}")
            arr[b] = v
        arrays[name] = arr
    present = {u: np.array([bd.present(u) for bd in bundles], dtype=bool) for u in MODALITIES}
    return BatchBundle(present=present, **arrays)


# -- parameters ------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Ordered parameter names and shapes; a pure function of the config."""
    c = config
    h, m, L = c.hidden_size, c.mlp_hidden, c.latent_dim
    s: dict[str, tuple] = {}

    def lin(name, fan_in, fan_out):
        s[f"{name}.weight"] = (fan_in, fan_out)
        s[f"{name}.bias"] = (fan_out,)

    def block(prefix):
        lin(f"{prefix}.mod", h, 6 * h)
        lin(f"{prefix}.qkv", h, 3 * h)
        lin(f"{prefix}.out", h, h)
        lin(f"{prefix}.mlp1", h, m)
        lin(f"{prefix}.mlp2", m, h)

    lin("in", 2 * L + 1, h)
    lin("t.fc1", c.freq_dim, h)
    lin("t.fc2", h, h)
    lin("cond.caption", c.caption_dim, h)
    lin("cond.video", c.video_dim, h)
    lin("cond.sync", c.sync_dim, h)
    s["null.caption"] = (c.caption_dim,)
    s["null.video"] = (c.video_dim,)
    s["null.sync"] = (c.sync_dim,)
    s["null.cot"] = (c.text_dim,)
    s["null.roi"] = (c.video_dim,)
    s["null.context"] = (L,)
    lin("video.proj", c.video_dim, h)
    lin("roi.proj", c.video_dim, h)
    lin("text.proj", c.text_dim, h)
    for i in range(c.multistream_layers):
        for stream in ("audio", "video", "text"):
            block(f"ms.{i}.{stream}")
    lin("fuse.gate", 2 * h, h)
    lin("fuse.value", h, h)
    for i in range(c.singlestream_layers):
        block(f"ss.{i}")
    lin("final.mod", h, 2 * h)
    lin("final.out", h, L)
    return s


def _zero_init(name: str) -> bool:
    # AdaLN-zero: modulation maps start at zero so every gate is closed;
    # the fusion value map starts at zero so fusion is a passthrough.
    return name.endswith(".bias") or ".mod." in name or name.startswith("fuse.value")


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    config.validate()
    rng = Rng(seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if _zero_init(name):
            data = np.zeros(shape, dtype=np.float32)
        elif name.startswith("null."):
            data = rng.normal(shape)
        else:
            data = rng.normal(shape) * np.float32(1.0 / math.sqrt(shape[0]))
        params[name] = Tensor(data, requires_grad=True)
    return params


def count_params(config: ModelConfig) -> int:
    return int(sum(int(np.prod(s)) for s in param_shapes(config).values()))


def _lin(params: Params, name: str, x) -> Tensor:
    return T.linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


# -- building blocks -------------------------------------------------------


def timestep_features(t, dim: int) -> Tensor:
    """Sinusoidal features ``[cos(1000 t w_i), sin(1000 t w_i)]``.

    ``t`` may be a float, an array of shape (B,), or a Tensor (differentiable).
    Frequencies ``w_i = 10000^(-i / (dim/2))`` are geometrically spaced.
    """
    if dim % 2:
        raise DomainError(f"timestep feature dim must be even, got {dim}")
    tt = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float32))
    tv = tt.data
    if np.any(tv < 0) or np.any(tv > 1) or not np.all(np.isfinite(tv)):
        raise DomainError(f"t must lie in [0, 1], got {tv}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half).astype(tv.dtype) * 1000.0
    args = T.reshape(tt, tt.shape + (1,)) * freqs
    return T.concat([T.cos(args), T.sin(args)], axis=-1)


def timestep_embed(params: Params, config: ModelConfig, t) -> Tensor:
    feats = timestep_features(t, config.freq_dim)
    return _lin(params, "t.fc2", T.silu(_lin(params, "t.fc1", feats)))


def _select(present: np.ndarray, value: np.ndarray, null: Tensor) -> Tensor:
    """Per batch element: the given features where present, else the null vector."""
    mask = present.reshape(present.shape + (1,) * (value.ndim - 1))
    return T.where(mask, Tensor(value), null)


def _as_batch(bundle, config: ModelConfig, batch: int) -> BatchBundle:
    if isinstance(bundle, BatchBundle):
        return bundle
    if isinstance(bundle, ConditionBundle):
        return collate([bundle] * batch, config)
    return collate(list(bundle), config)


def global_condition(params: Params, config: ModelConfig, bundle, t_emb: Tensor) -> Tensor:
    """c_g = P_cap(caption) + P_vid(mean_t video) + P_sync(mean_t sync) + t_emb."""
    squeeze = t_emb.ndim == 1
    if squeeze:
        t_emb = T.reshape(t_emb, (1,) + t_emb.shape)
    bb = _as_batch(bundle, config, t_emb.shape[0])
    p = bb.present
    cap = _select(p["caption"], bb.caption_emb, params["null.caption"])
    vid = T.mean(_select(p["video"], bb.video_feats, params["null.video"]), axis=1)
    syn = T.mean(_select(p["video"], bb.sync_feats, params["null.sync"]), axis=1)
    c = (_lin(params, "cond.caption", cap) + _lin(params, "cond.video", vid)
         + _lin(params, "cond.sync", syn) + t_emb)
    return T.reshape(c, c.shape[1:]) if squeeze else c


def rope_tables(length: int, head_dim: int, base: float, dtype=np.float32):
    half = head_dim // 2
    inv = base ** (-np.arange(half) / half)
    ang = np.arange(length)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _heads(x: Tensor, heads: int) -> Tensor:
    B, L, h = x.shape
    return T.swapaxes(T.reshape(x, (B, L, heads, h // heads)), 1, 2)


def _merge(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return T.reshape(T.swapaxes(x, 1, 2), (B, L, H * dh))


def _modulation(params: Params, prefix: str, c_g: Tensor) -> list[Tensor]:
    mod = _lin(params, f"{prefix}.mod", T.silu(c_g))
    B, h6 = mod.shape
    return [T.reshape(m, (B, 1, h6 // 6)) for m in T.split(mod, [h6 // 6] * 6, axis=-1)]


def _qkv(params: Params, prefix: str, x: Tensor, shift, scale, config: ModelConfig):
    hx = T.modulated_layer_norm(x, scale, shift)
    q, k, v = T.split(_lin(params, f"{prefix}.qkv", hx), [config.hidden_size] * 3, axis=-1)
    q, k, v = (_heads(z, config.heads) for z in (q, k, v))
    cos, sin = rope_tables(x.shape[1], config.head_dim, config.rope_base, x.dtype)
    return T.rope(q, cos, sin), T.rope(k, cos, sin), v


def _mlp_residual(params: Params, prefix: str, x: Tensor, shift, scale, gate) -> Tensor:
    hx = T.modulated_layer_norm(x, scale, shift)
    return x + gate * _lin(params, f"{prefix}.mlp2", T.gelu(_lin(params, f"{prefix}.mlp1", hx)))


def _batched(x: Tensor, c_g: Tensor):
    x, c_g = T.as_tensor(x), T.as_tensor(c_g)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if c_g.ndim == 1:
        c_g = T.reshape(c_g, (1,) + c_g.shape)
    return x, c_g, squeeze


def multi_stream_block(params: Params, prefix: str, config: ModelConfig,
                       audio, video, text, c_g) -> tuple[Tensor, Tensor, Tensor]:
    """One MM-DiT block: per-stream AdaLN/qkv/out/MLP, one joint attention.

    Streams are (B x L_s x h) or unbatched (L_s x h). Video and text may have
    length 0; audio may not.
    """
    streams = {"audio": audio, "video": video, "text": text}
    squeeze = False
    for name in streams:
        streams[name], cg, squeeze = _batched(streams[name], c_g)
    c_g = cg
    if streams["audio"].shape[1] == 0:
        raise ContractError("multi_stream_block needs at least one audio token")
    mods, qs, ks, vs, lens = {}, [], [], [], []
    for name, x in streams.items():
        p = f"{prefix}.{name}"
        mods[name] = _modulation(params, p, c_g)
        shift1, scale1 = mods[name][0], mods[name][1]
        q, k, v = _qkv(params, p, x, shift1, scale1, config)
        qs.append(q), ks.append(k), vs.append(v), lens.append(x.shape[1])
    joint = T.attention(T.concat(qs, axis=2), T.concat(ks, axis=2), T.concat(vs, axis=2))
    outs = []
    for (name, x), att in zip(streams.items(), T.split(joint, lens, axis=2)):
        p = f"{prefix}.{name}"
        shift1, scale1, gate1, shift2, scale2, gate2 = mods[name]
        x = x + gate1 * _lin(params, f"{p}.out", _merge(att))
        x = _mlp_residual(params, p, x, shift2, scale2, gate2)
        outs.append(T.reshape(x, x.shape[1:]) if squeeze else x)
    return tuple(outs)


def single_stream_block(params: Params, prefix: str, config: ModelConfig, x, c_g) -> Tensor:
    """DiT block with AdaLN modulation from ``c_g`` and gated residuals."""
    x, c_g, squeeze = _batched(x, c_g)
    shift1, scale1, gate1, shift2, scale2, gate2 = _modulation(params, prefix, c_g)
    q, k, v = _qkv(params, prefix, x, shift1, scale1, config)
    x = x + gate1 * _lin(params, f"{prefix}.out", _merge(T.attention(q, k, v)))
    x = _mlp_residual(params, prefix, x, shift2, scale2, gate2)
    return T.reshape(x, x.shape[1:]) if squeeze else x


def upsample_matrix(video_len: int, audio_len: int, mode: str = "linear") -> np.ndarray:
    """(audio_len x video_len) interpolation matrix; index La-1 maps to Lv-1."""
    if video_len > audio_len:
        raise ContractError(f"cannot upsample {video_len} video frames to {audio_len} audio frames")
    if video_len < 1:
        raise ContractError("gated fusion needs at least one video frame")
    U = np.zeros((audio_len, video_len), dtype=np.float64)
    for j in range(audio_len):
        pos = j * (video_len - 1) / (audio_len - 1) if audio_len > 1 else 0.0
        if mode == "nearest":
            U[j, int(math.floor(pos + 0.5))] = 1.0
            continue
        lo = int(math.floor(pos))
        hi = min(lo + 1, video_len - 1)
        w = pos - lo
        U[j, lo] += 1.0 - w
        U[j, hi] += w
    return U


def gated_fuse(params: Params, config: ModelConfig, audio, video) -> Tensor:
    """audio + sigmoid(W_g [audio; up(video)] + b_g) * (W_v up(video))."""
    audio, video = T.as_tensor(audio), T.as_tensor(video)
    squeeze = audio.ndim == 2
    if squeeze:
        audio, video = T.reshape(audio, (1,) + audio.shape), T.reshape(video, (1,) + video.shape)
    U = upsample_matrix(video.shape[1], audio.shape[1], config.upsample).astype(audio.dtype)
    up = T.matmul(Tensor(U), video)
    gate = T.sigmoid(_lin(params, "fuse.gate", T.concat([audio, up], axis=-1)))
    out = audio + gate * _lin(params, "fuse.value", up)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def input_tokens(params: Params, config: ModelConfig, x_t: Tensor, bb: BatchBundle) -> Tensor:
    """Project ``[x_t ; context ; mask indicator]`` to hidden width."""
    given = bb.context_mask & bb.present["context"][:, None]
    null_ctx = T.where(bb.present["context"][:, None, None], Tensor(np.zeros((1, 1, 1), x_t.dtype)),
                       params["null.context"])
    ctx = T.where(given[:, :, None], Tensor(bb.audio_context.astype(x_t.dtype)), null_ctx)
    ind = Tensor(given[:, :, None].astype(x_t.dtype))
    return _lin(params, "in", T.concat([x_t, ctx, ind], axis=-1))


def output_head(params: Params, x: Tensor, c_g: Tensor) -> Tensor:
    shift, scale = T.split(_lin(params, "final.mod", T.silu(c_g)), [x.shape[-1]] * 2, axis=-1)
    B = x.shape[0]
    shift, scale = T.reshape(shift, (B, 1, -1)), T.reshape(scale, (B, 1, -1))
    return _lin(params, "final.out", T.modulated_layer_norm(x, scale, shift))


def forward(params: Params, config: ModelConfig, x_t, t, bundle) -> Tensor:
    """Predict the velocity at ``(x_t, t)`` given the conditions.

    ``x_t`` is (latent_len x latent_dim) or batched with a leading axis; ``t``
    is a scalar or one value per batch element; ``bundle`` is a single
    ConditionBundle (shared by the batch), a sequence of them, or a BatchBundle.
    """
    c = config
    x_t = T.as_tensor(x_t)
    squeeze = x_t.ndim == 2
    if squeeze:
        x_t = T.reshape(x_t, (1,) + x_t.shape)
    if x_t.ndim != 3 or x_t.shape[1:] != (c.latent_len, c.latent_dim):
        raise ShapeError(f"x_t has shape {x_t.shape}, expected (B, {c.latent_len}, {c.latent_dim})")
    T.assert_finite(x_t, "x_t")
    B = x_t.shape[0]
    tt = np.broadcast_to(np.asarray(t, dtype=x_t.dtype), (B,)).copy()
    bb = _as_batch(bundle, c, B)
    if bb.size != B:
        raise ShapeError(f"bundle batch {bb.size} does not match x_t batch {B}")

    t_emb = timestep_embed(params, c, tt)
    c_g = global_condition(params, c, bb, t_emb)
    p = bb.present
    video = (_lin(params, "video.proj", _select(p["video"], bb.video_feats, params["null.video"]))
             + _lin(params, "roi.proj", _select(p["roi"], bb.roi_feats, params["null.roi"])))
    text = _lin(params, "text.proj", _select(p["cot"], bb.cot_tokens, params["null.cot"]))
    audio = input_tokens(params, c, x_t, bb)
    for i in range(c.multistream_layers):
        audio, video, text = multi_stream_block(params, f"ms.{i}", c, audio, video, text, c_g)
    x = gated_fuse(params, c, audio, video)
    for i in range(c.singlestream_layers):
        x = single_stream_block(params, f"ss.{i}", c, x, c_g)
    out = output_head(params, x, c_g)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def null_bundle(params: Params, config: ModelConfig, template: ConditionBundle,
                units: Sequence[str]) -> ConditionBundle:
    """Copy of ``template`` with ``units`` filled explicitly by their null vectors."""
    c = config
    changes = {}
    tile = lambda name, n: np.tile(params[name].data, (n, 1))  # noqa: E731
    for u in units:
        if u == "video":
            changes["video_feats"] = tile("null.video", c.video_len)
            changes["sync_feats"] = tile("null.sync", c.video_len)
        elif u == "caption":
            changes["caption_emb"] = params["null.caption"].data.copy()
        elif u == "cot":
            changes["cot_tokens"] = tile("null.cot", c.text_len)
        elif u == "roi":
            changes["roi_feats"] = tile("null.roi", c.video_len)
        else:
            raise ContractError(f"no explicit null form for modality {u!r}")
    return dataclasses.replace(template, **changes)


def detached(params: Params) -> Params:
    return {k: Tensor(v.data) for k, v in params.items()}


def trainable(params: Mapping[str, np.ndarray | Tensor], dtype=np.float32) -> Params:
    return {k: Tensor(np.array(v.data if isinstance(v, Tensor) else v, dtype=dtype), requires_grad=True)
            for k, v in params.items()}
