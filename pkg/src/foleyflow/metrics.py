"""Objective metrics: Fréchet distance (mono/stereo), label KL, CLAP-style
cosine alignment and windowed DeSync, plus frozen seeded stand-in scorers.

All statistics are computed in float64.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, FoleyFlowError, NumericError, ShapeError
from .rng import Rng
from .serialize import canonical_json

EIG_CLAMP = 0.0
PROB_FLOOR = 1e-9


@dataclass
class EmbedStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ShapeError(f"covariance {self.cov.shape} does not match mean {self.mean.shape}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-9, rtol=0):
            raise ContractError("covariance is not symmetric to 1e-9")
        self.cov = 0.5 * (self.cov + self.cov.T)
        if self.count < 2:
            raise ContractError(f"EmbedStats needs count >= 2, got {self.count}")


def embed_stats(embeddings) -> EmbedStats:
    """Sample mean and unbiased (n-1) covariance."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ContractError(f"need at least 2 embeddings, got {x.shape[0]}")
    mu = x.mean(axis=0)
    xc = x - mu
    return EmbedStats(mu, xc.T @ xc / (x.shape[0] - 1), x.shape[0])


def _eigh(m: np.ndarray, what: str):
    try:
        return np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(m) if np.all(np.isfinite(m)) else float("nan")
        raise NumericError(f"eigen-solver failed on {what} (condition number {cond:.3e})") from exc


def sqrtm_psd(m: np.ndarray, clamp: float = EIG_CLAMP) -> np.ndarray:
    """Symmetric square root; eigenvalues below ``clamp`` are set to it."""
    m = 0.5 * (m + m.T)
    w, q = _eigh(m, "covariance")
    return (q * np.sqrt(np.maximum(w, clamp))) @ q.T


def frechet_distance(a: EmbedStats, b: EmbedStats, clamp: float = EIG_CLAMP) -> float:
    """‖μa−μb‖² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)."""
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"embedding dims differ: {a.mean.shape} vs {b.mean.shape}")
    ra = sqrtm_psd(a.cov, clamp)
    inner = ra @ b.cov @ ra
    w, _ = _eigh(0.5 * (inner + inner.T), "sqrt(Σa) Σb sqrt(Σa)")
    tr_sqrt = float(np.sqrt(np.maximum(w, clamp)).sum())
    diff = a.mean - b.mean
    fd = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * tr_sqrt
    return max(fd, 0.0)


def _stats(x) -> EmbedStats:
    return x if isinstance(x, EmbedStats) else embed_stats(x)


def stereo_fd(gen_left, gen_right, ref_left, ref_right) -> float:
    """Mean of per-channel FDs; each argument is embeddings or EmbedStats."""
    left = frechet_distance(_stats(gen_left), _stats(ref_left))
    right = frechet_distance(_stats(gen_right), _stats(ref_right))
    return (left + right) / 2


def _floored(p: np.ndarray) -> np.ndarray:
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    return p / p.sum()


def kl_labels(generated: Sequence, reference: Sequence, direction: str = "ref||gen") -> float:
    """Mean over pairs of KL between class distributions (floored, renormalized).

    ``direction="ref||gen"`` computes KL(reference ‖ generated).
    """
    if len(generated) != len(reference):
        raise ShapeError(f"{len(generated)} generated vs {len(reference)} reference distributions")
    if not len(generated):
        raise ContractError("kl_labels needs at least one pair")
    if direction not in ("ref||gen", "gen||ref"):
        raise DomainError(f"unknown KL direction {direction!r}")
    total = 0.0
    for g, r in zip(generated, reference):
        g, r = _floored(g), _floored(r)
        if g.shape != r.shape:
            raise ShapeError(f"class counts differ: {g.shape} vs {r.shape}")
        p, q = (r, g) if direction == "ref||gen" else (g, r)
        total += float(np.sum(p * np.log(p / q)))
    return total / len(generated)


def clap_score(audio_emb, text_emb) -> float:
    a = np.asarray(audio_emb, dtype=np.float64).reshape(-1)
    b = np.asarray(text_emb, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("clap_score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def window_frames(clip_seconds: float, window_seconds: float, length: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Frame ranges ``[start, stop)`` of the first and last windows."""
    if clip_seconds < window_seconds:
        raise ContractError(f"clip of {clip_seconds}s is shorter than the {window_seconds}s window")
    n = round_half_up(window_seconds / clip_seconds * length)
    n = max(1, min(n, length))
    return (0, n), (length - n, length)


# -- stand-in scorers ------------------------------------------------------


@dataclass
class Anchors:
    """Optional world structure that lets the aligner decode content.

    ``audio_basis`` (K x latent_dim) holds per-class latent directions;
    ``text_decoder`` / ``caption_decoder`` / ``video_decoder`` map the
    respective feature spaces back to K class weights.
    """

    audio_basis: np.ndarray
    text_decoder: np.ndarray
    caption_decoder: np.ndarray
    video_decoder: np.ndarray


class ScorerSuite:
    """Frozen seeded affine-plus-nonlinearity maps standing in for the
    pretrained embedder, classifier, audio-text aligner and sync scorer."""

    def __init__(self, seed: int, latent_len: int, latent_dim: int, text_dim: int,
                 caption_dim: int, video_dim: int, sync_dim: int, classes: int = 8,
                 embed_dim: int = 16, shared_dim: int = 16, anchors: Anchors | None = None):
        self.seed = seed
        self.dims = dict(latent_len=latent_len, latent_dim=latent_dim, text_dim=text_dim,
                         caption_dim=caption_dim, video_dim=video_dim, sync_dim=sync_dim,
                         classes=classes, embed_dim=embed_dim, shared_dim=shared_dim)
        rng = Rng(seed).spawn("scorers")
        flat = latent_len * latent_dim
        half = latent_len * (latent_dim // 2) if latent_dim >= 2 else flat
        g = lambda *s: rng.normal(s, dtype=np.float64)  # noqa: E731
        self._embed_w, self._embed_b = g(flat, embed_dim) / math.sqrt(flat), 0.1 * g(embed_dim)
        self._chan_w, self._chan_b = g(half, embed_dim) / math.sqrt(half), 0.1 * g(embed_dim)
        self._cls_w, self._cls_b = g(flat, classes) * (2.0 / math.sqrt(flat)), 0.1 * g(classes)
        self._sync_w = np.abs(g(sync_dim)) + 0.1
        if anchors is None:
            K = classes
            anchors = Anchors(g(K, latent_dim), g(text_dim, K), g(caption_dim, K), g(video_dim, K))
        self.anchors = anchors
        K = anchors.audio_basis.shape[0]
        self._shared = g(K, shared_dim) / math.sqrt(K)
        self._basis_pinv = np.linalg.pinv(anchors.audio_basis)  # latent_dim x K

    # embedder
    def embed(self, latent) -> np.ndarray:
        x = np.asarray(latent, dtype=np.float64).reshape(-1)
        return np.tanh(x @ self._embed_w + self._embed_b)

    def embed_channel(self, channel_latent) -> np.ndarray:
        x = np.asarray(channel_latent, dtype=np.float64).reshape(-1)
        return np.tanh(x @ self._chan_w + self._chan_b)

    # classifier
    def classify(self, latent) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64).reshape(-1) @ self._cls_w + self._cls_b
        e = np.exp(z - z.max())
        return _floored(e / e.sum())

    # aligner
    def _to_shared(self, class_weights: np.ndarray) -> np.ndarray:
        return np.tanh(class_weights @ self._shared)

    def audio_classes(self, latent) -> np.ndarray:
        x = np.asarray(latent, dtype=np.float64)
        return np.maximum(x @ self._basis_pinv, 0.0).sum(axis=0)

    def audio_embed(self, latent) -> np.ndarray:
        return self._to_shared(self.audio_classes(latent))

    def text_embed(self, cot_tokens) -> np.ndarray:
        t = np.atleast_2d(np.asarray(cot_tokens, dtype=np.float64))
        return self._to_shared(np.maximum(t @ self.anchors.text_decoder, 0.0).sum(axis=0))

    def caption_embed(self, caption) -> np.ndarray:
        c = np.asarray(caption, dtype=np.float64).reshape(-1)
        return self._to_shared(np.maximum(c @ self.anchors.caption_decoder, 0.0))

    def video_embed(self, video_feats) -> np.ndarray:
        v = np.atleast_2d(np.asarray(video_feats, dtype=np.float64))
        return self._to_shared(np.maximum(v @ self.anchors.video_decoder, 0.0).sum(axis=0))

    # sync scorer
    def sync_score(self, latent_window, sync_window) -> float:
        """Misalignment between audio onsets and the sync track in one window:
        |best lag| / window length + (1 - peak correlation) / 2."""
        a = np.asarray(latent_window, dtype=np.float64)
        s = np.abs(np.asarray(sync_window, dtype=np.float64) @ self._sync_w)
        n = a.shape[0]
        energy = np.linalg.norm(a, axis=1)
        onset = np.maximum(np.diff(energy, prepend=energy[:1]), 0.0)
        if s.shape[0] != n:
            s = np.interp(np.linspace(0, s.shape[0] - 1, n), np.arange(s.shape[0]), s)
        best_lag, best = 0, -np.inf
        max_lag = max(1, n // 4)
        for lag in range(-max_lag, max_lag + 1):
            lo, hi = max(0, lag), min(n, n + lag)
            x, y = onset[lo:hi], s[lo - lag:hi - lag]
            denom = np.linalg.norm(x) * np.linalg.norm(y)
            corr = float(x @ y / denom) if denom > 0 else 0.0
            if corr > best + 1e-12:
                best_lag, best = lag, corr
        return abs(best_lag) / n + 0.5 * (1.0 - best)

    def to_dict(self) -> dict:
        return {"seed": self.seed, **self.dims}


def desync(latent, sync_feats, suite, clip_seconds: float = 9.1, window_seconds: float = 4.8) -> float:
    """Mean sync score over the first and last ``window_seconds`` of the clip."""
    latent = np.asarray(latent)
    sync_feats = np.asarray(sync_feats)
    (a0, a1), (b0, b1) = window_frames(clip_seconds, window_seconds, latent.shape[0])
    (s0, s1), (r0, r1) = window_frames(clip_seconds, window_seconds, sync_feats.shape[0])
    score = suite.sync_score if hasattr(suite, "sync_score") else suite
    first = score(latent[a0:a1], sync_feats[s0:s1])
    last = score(latent[b0:b1], sync_feats[r0:r1])
    return (first + last) / 2


# -- orchestration ---------------------------------------------------------


@dataclass
class MetricReport:
    fd: float | None = None
    fd_stereo: float | None = None
    kl: float | None = None
    clap: float | None = None
    clap_cap: float | None = None
    desync: float | None = None
    protocol: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("fd", "fd_stereo", "kl", "clap", "clap_cap", "desync"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise NumericError(f"metric {name} is not finite: {v}")

    def to_json(self) -> str:
        return canonical_json(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


@dataclass
class Protocol:
    clip_seconds: float = 9.1
    window_seconds: float = 4.8
    kl_direction: str = "ref||gen"
    stereo: bool = True
    threads: int = 1


def _guarded(errors: dict, name: str, fn: Callable[[], float]) -> float | None:
    try:
        value = fn()
    except FoleyFlowError as exc:
        errors[name] = f"{type(exc).__name__}: {exc}"
        return None
    if not math.isfinite(value):
        errors[name] = f"non-finite value {value}"
        return None
    return value


def evaluate(generated: Sequence[np.ndarray], reference: Sequence, suite: ScorerSuite,
             protocol: Protocol | None = None, extra: dict | None = None) -> MetricReport:
    """Score generated latents against reference records (same order).

    Each reference item needs ``.x1`` and ``.bundle``; alignment and DeSync
    use the reference item's conditions.
    """
    protocol = protocol or Protocol()
    if not len(generated) or not len(reference):
        raise ContractError("evaluate needs non-empty generated and reference sets")
    if len(generated) != len(reference):
        raise ShapeError(f"{len(generated)} generated clips vs {len(reference)} references")
    gen = [np.asarray(g, dtype=np.float64) for g in generated]
    ref = [np.asarray(r.x1, dtype=np.float64) for r in reference]

    def per_clip(i: int) -> dict:
        g, r, bundle = gen[i], ref[i], reference[i].bundle
        row = {"emb_g": suite.embed(g), "emb_r": suite.embed(r),
               "p_g": suite.classify(g), "p_r": suite.classify(r)}
        if protocol.stereo and g.shape[1] >= 2:
            h = g.shape[1] // 2
            row.update(l_g=suite.embed_channel(g[:, :h]), r_g=suite.embed_channel(g[:, h:2 * h]),
                       l_r=suite.embed_channel(r[:, :h]), r_r=suite.embed_channel(r[:, h:2 * h]))
        a = suite.audio_embed(g)
        row["clap"] = clap_score(a, suite.text_embed(bundle.cot_tokens)) if bundle.cot_tokens is not None else None
        row["clap_cap"] = clap_score(a, suite.caption_embed(bundle.caption_emb)) if bundle.caption_emb is not None else None
        row["desync"] = (desync(g, bundle.sync_feats, suite, protocol.clip_seconds, protocol.window_seconds)
                         if bundle.sync_feats is not None else None)
        return row

    # map() preserves order, so the reduction below is deterministic
    with ThreadPoolExecutor(max_workers=max(1, protocol.threads)) as pool:
        rows = list(pool.map(per_clip, range(len(gen))))

    errors: dict = {}
    col = lambda k: [row[k] for row in rows]  # noqa: E731

    def mean_of(key: str) -> float:
        vals = [v for v in col(key) if v is not None]
        if not vals:
            raise ContractError(f"no records carry the conditions needed for {key}")
        return float(np.mean(vals))

    report = MetricReport(
        fd=_guarded(errors, "fd", lambda: frechet_distance(embed_stats(col("emb_g")), embed_stats(col("emb_r")))),
        fd_stereo=_guarded(errors, "fd_stereo", lambda: stereo_fd(col("l_g"), col("r_g"), col("l_r"), col("r_r")))
        if "l_g" in rows[0] else None,
        kl=_guarded(errors, "kl", lambda: kl_labels(col("p_g"), col("p_r"), protocol.kl_direction)),
        clap=_guarded(errors, "clap", lambda: mean_of("clap")),
        clap_cap=_guarded(errors, "clap_cap", lambda: mean_of("clap_cap")),
        desync=_guarded(errors, "desync", lambda: mean_of("desync")),
        errors=errors,
    )
    report.protocol = {
        "count_generated": len(gen), "count_reference": len(ref),
        "clip_seconds": protocol.clip_seconds, "window_seconds": protocol.window_seconds,
        "kl_direction": protocol.kl_direction, "kl_reduction": "mean over pairs",
        "covariance": "unbiased (n-1)", "eigen_clamp": EIG_CLAMP, "prob_floor": PROB_FLOOR,
        "stereo_split": "latent channels halves" if protocol.stereo else None,
        "frames_rounding": "round half up", "scorers": suite.to_dict(),
    }
    if extra:
        report.protocol.update(extra)
    return report
