"""Synthetic multimodal world with analytically known structure.

Every event type owns frozen signatures (latent, visual, sync) drawn from the
world seed. A record's latent is ``ambient + Σ event components + noise``;
each term is snapped to a 2**-16 grid so that, for magnitudes below 128, every
partial sum is exact in float32 and the decomposition can be reassembled
bit-for-bit.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .errors import ConfigError, ContractError, FormatError
from .mmdit import ConditionBundle, ModelConfig
from .rng import Rng
from .serialize import Reader, canonical_json, pack_string, tensor_bytes

GRID = 2.0 ** -16
DIFFICULTIES = ("easy", "medium", "hard")
AUDIT_RECALIBRATION_TRIGGER = 0.05
DISTINCT_COSINE = 0.3


def _snap(x: np.ndarray) -> np.ndarray:
    out = (np.round(np.asarray(x, dtype=np.float64) / GRID) * GRID).astype(np.float32)
    if np.abs(out).max(initial=0.0) >= 128:
        raise ContractError("latent magnitude >= 128 breaks exact reassembly")
    return out


@dataclass(frozen=True)
class WorldConfig:
    K: int = 4
    latent_len: int = 8
    latent_dim: int = 4
    video_len: int = 4
    video_dim: int = 8
    text_dim: int = 8
    caption_dim: int = 8
    sync_dim: int = 4
    max_events: int = 3
    sigma: float = 0.05
    seed: int = 0
    ambient_scale: float = 0.1
    signature_scale: float = 1.0
    cot_noise: float = 0.0
    clip_seconds: float = 9.1

    def validate(self) -> "WorldConfig":
        for name in ("K", "latent_len", "latent_dim", "video_len", "video_dim", "text_dim",
                     "caption_dim", "sync_dim"):
            if getattr(self, name) < 2:
                raise ConfigError(f"world.{name} must be >= 2, got {getattr(self, name)}")
        if self.max_events < 1:
            raise ConfigError(f"world.max_events must be >= 1, got {self.max_events}")
        if self.sigma < 0:
            raise ConfigError(f"world.sigma must be >= 0, got {self.sigma}")
        if not 0 <= self.cot_noise <= 1:
            raise ConfigError(f"world.cot_noise must lie in [0, 1], got {self.cot_noise}")
        if self.video_len > self.latent_len:
            raise ConfigError("world.video_len must not exceed world.latent_len")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown world config key(s): {sorted(unknown)}")
        return cls(**d).validate()

    def model_config(self, **overrides) -> ModelConfig:
        """Toy model whose feature widths match this world."""
        dims = dict(latent_len=self.latent_len, latent_dim=self.latent_dim, video_len=self.video_len,
                    video_dim=self.video_dim, text_dim=self.text_dim, caption_dim=self.caption_dim,
                    sync_dim=self.sync_dim, text_len=self.max_events)
        dims.update(overrides)
        return ModelConfig(**dims).validate()


@dataclass(frozen=True)
class Event:
    kind: int
    onset: float
    duration: float
    amplitude: float


@dataclass(frozen=True)
class EventScript:
    events: tuple[Event, ...]
    clip_seconds: float = 9.1
    roi_index: int = 0

    def validate(self, world: WorldConfig) -> "EventScript":
        if not 1 <= len(self.events) <= world.max_events:
            raise ContractError(f"script has {len(self.events)} events; allowed 1..{world.max_events}")
        for i, e in enumerate(self.events):
            if not 0 <= e.kind < world.K:
                raise ContractError(f"event {i}: type {e.kind} outside [0, {world.K})")
            if not 0 <= e.onset < 1:
                raise ContractError(f"event {i}: onset {e.onset} outside [0, 1)")
            if e.duration <= 0 or e.onset + e.duration > 1 + 1e-12:
                raise ContractError(f"event {i}: onset + duration must be <= 1 with duration > 0")
            if e.amplitude < 0:
                raise ContractError(f"event {i}: negative amplitude {e.amplitude}")
        if not 0 <= self.roi_index < len(self.events):
            raise ContractError(f"roi_index {self.roi_index} does not name an event")
        return self

    def sorted(self) -> "EventScript":
        order = sorted(range(len(self.events)), key=lambda i: (self.events[i].onset, i))
        return EventScript(tuple(self.events[i] for i in order), self.clip_seconds, order.index(self.roi_index))

    def to_dict(self) -> dict:
        return {"events": [[e.kind, e.onset, e.duration, e.amplitude] for e in self.events],
                "clip_seconds": self.clip_seconds, "roi_index": self.roi_index}

    @classmethod
    def from_dict(cls, d) -> "EventScript":
        return cls(tuple(Event(int(k), float(o), float(du), float(a)) for k, o, du, a in d["events"]),
                   float(d["clip_seconds"]), int(d["roi_index"]))


@dataclass(frozen=True)
class Scores:
    semantic: float
    clap: float
    desync: float
    n_events: int

    def as_tuple(self) -> tuple:
        return (self.semantic, self.clap, self.desync, self.n_events)


@dataclass
class DatasetRecord:
    script: EventScript
    bundle: ConditionBundle
    x1: np.ndarray
    event_components: list[np.ndarray]
    ambient: np.ndarray
    noise: np.ndarray
    pad_token: np.ndarray
    scores: Scores | None = None
    difficulty: str | None = None
    split: str = "train"
    cot_seed: int = 0

    @property
    def n_events(self) -> int:
        return len(self.event_components)

    def reassemble(self) -> np.ndarray:
        """ambient + components in stored order (noise excluded)."""
        acc = self.ambient.copy()
        for c in self.event_components:
            acc = acc + c
        return acc

    def cot_without(self, index: int) -> np.ndarray:
        """CoT tokens describing every event except ``index``."""
        rows = [r for i, r in enumerate(self.bundle.cot_tokens[:self.n_events]) if i != index]
        pad = [self.pad_token] * (self.bundle.cot_tokens.shape[0] - len(rows))
        return np.stack(rows + pad).astype(np.float32)


class World:
    """Frozen tables derived from a WorldConfig."""

    def __init__(self, config: WorldConfig):
        self.config = config.validate()
        c = config
        rng = Rng(c.seed).spawn("world")
        sig = rng.normal((c.K, c.latent_dim), dtype=np.float64)
        self.signatures = _snap(sig / np.linalg.norm(sig, axis=1, keepdims=True) * c.signature_scale)
        self.visual = rng.normal((c.K, c.video_dim)).astype(np.float32)
        sync = np.abs(rng.normal((c.K, c.sync_dim), dtype=np.float64))
        self.sync = (sync / np.linalg.norm(sync, axis=1, keepdims=True)).astype(np.float32)
        self.caption_proj = (rng.normal((c.K, c.caption_dim)) / math.sqrt(c.K)).astype(np.float32)
        self.code_dim = c.K + 4
        self.cot_proj = (rng.normal((self.code_dim, c.text_dim)) / math.sqrt(self.code_dim)).astype(np.float32)
        self.ambient = _snap(c.ambient_scale * rng.normal((c.latent_len, c.latent_dim), dtype=np.float64))
        code = np.zeros(self.code_dim, dtype=np.float32)
        code[-1] = 1.0
        self.pad_token = (code @ self.cot_proj).astype(np.float32)

    @cached_property
    def anchors(self) -> metrics.Anchors:
        K = self.config.K
        return metrics.Anchors(
            audio_basis=self.signatures.astype(np.float64),
            text_decoder=np.linalg.pinv(self.cot_proj.astype(np.float64))[:, :K],
            caption_decoder=np.linalg.pinv(self.caption_proj.astype(np.float64)),
            video_decoder=np.linalg.pinv(self.visual.astype(np.float64)),
        )

    def scorer_suite(self, seed: int = 0) -> metrics.ScorerSuite:
        c = self.config
        return metrics.ScorerSuite(seed, c.latent_len, c.latent_dim, c.text_dim, c.caption_dim,
                                   c.video_dim, c.sync_dim, classes=c.K, anchors=self.anchors)

    def distinct(self, a: int, b: int) -> bool:
        """Pairing predicate: latent signatures with cosine below 0.3."""
        sa, sb = self.signatures[a].astype(np.float64), self.signatures[b].astype(np.float64)
        return float(sa @ sb / (np.linalg.norm(sa) * np.linalg.norm(sb))) < DISTINCT_COSINE

    def model_config(self, **overrides) -> ModelConfig:
        return self.config.model_config(**overrides)


def raised_cosine(onset: float, duration: float, frames: int) -> np.ndarray:
    """Window evaluated at frame centres; zero outside [onset, onset+duration]."""
    centres = (np.arange(frames) + 0.5) / frames
    phase = (centres - onset) / duration
    inside = (phase >= 0) & (phase <= 1)
    return np.where(inside, 0.5 * (1 - np.cos(2 * np.pi * phase)), 0.0)


def _onset_pulse(onset: float, frames: int, width: float = 0.75) -> np.ndarray:
    pos = onset * frames
    return np.exp(-0.5 * ((np.arange(frames) + 0.5 - pos) / width) ** 2)


def event_code(world: World, e: Event) -> np.ndarray:
    code = np.zeros(world.code_dim, dtype=np.float64)
    code[e.kind] = 1.0
    code[world.config.K:world.config.K + 3] = (e.onset, e.duration, e.amplitude)
    return code


def render_cot(world: World, script: EventScript, rng: Rng | None = None) -> np.ndarray:
    """One token per event plus pad tokens; ``cot_noise`` corrupts descriptions."""
    c = world.config
    q = c.cot_noise
    rows = []
    for e in script.events:
        if rng is not None and q > 0:
            kind = int(rng.integers(c.K)) if rng.uniform() < q else e.kind
            e = Event(kind, float(np.clip(e.onset + q * 0.1 * rng.normal((), np.float64), 0, 0.999)),
                      e.duration, e.amplitude)
        rows.append((event_code(world, e) @ world.cot_proj).astype(np.float32))
    rows += [world.pad_token] * (c.max_events - len(rows))
    return np.stack(rows).astype(np.float32)


def render_record(script: EventScript, world: World, rng: Rng, split: str = "train",
                  cot_seed: int | None = None) -> DatasetRecord:
    c = world.config
    script = script.validate(c).sorted()
    components, video, sync, roi = [], np.zeros((c.video_len, c.video_dim)), np.zeros((c.video_len, c.sync_dim)), None
    for i, e in enumerate(script.events):
        bump = raised_cosine(e.onset, e.duration, c.latent_len)
        components.append(_snap(e.amplitude * bump[:, None] * world.signatures[e.kind][None, :]))
        vis = e.amplitude * raised_cosine(e.onset, e.duration, c.video_len)[:, None] * world.visual[e.kind]
        video += vis
        sync += _onset_pulse(e.onset, c.video_len)[:, None] * world.sync[e.kind]
        if i == script.roi_index:
            roi = vis
    noise = _snap(c.sigma * rng.normal((c.latent_len, c.latent_dim), dtype=np.float64))
    counts = np.bincount([e.kind for e in script.events], minlength=c.K).astype(np.float32)
    cot_seed = int(rng.integers(2 ** 62)) if cot_seed is None else cot_seed
    bundle = ConditionBundle(
        video_feats=video.astype(np.float32), sync_feats=sync.astype(np.float32),
        caption_emb=(counts @ world.caption_proj).astype(np.float32),
        cot_tokens=render_cot(world, script, Rng(cot_seed)),
        roi_feats=roi.astype(np.float32))
    rec = DatasetRecord(script, bundle, np.zeros(0), components, world.ambient.copy(), noise,
                        world.pad_token.copy(), split=split, cot_seed=cot_seed)
    rec.x1 = rec.reassemble() + noise
    return rec


def roi_features(world: World, script: EventScript, index: int) -> np.ndarray:
    """Visual track of event ``index`` alone (the ROI crop for that object)."""
    if not 0 <= index < len(script.events):
        raise ContractError(f"event index {index} out of range for {len(script.events)} events")
    c, e = world.config, script.events[index]
    return (e.amplitude * raised_cosine(e.onset, e.duration, c.video_len)[:, None]
            * world.visual[e.kind]).astype(np.float32)


def score_record(record: DatasetRecord, suite: metrics.ScorerSuite, clip_seconds: float = 9.1) -> Scores:
    a = suite.audio_embed(record.x1)
    b = record.bundle
    f32 = lambda v: float(np.float32(v))  # noqa: E731
    return Scores(
        semantic=f32(metrics.clap_score(a, suite.video_embed(b.video_feats))),
        clap=f32(metrics.clap_score(a, suite.text_embed(b.cot_tokens))),
        desync=f32(metrics.desync(record.x1, b.sync_feats, suite, clip_seconds, min(4.8, clip_seconds))),
        n_events=record.n_events)


def random_script(world: World, rng: Rng, n_events: int | None = None) -> EventScript:
    """Random script; event types are mutually distinct where the vocabulary allows."""
    c = world.config
    n = int(rng.integers(c.max_events)) + 1 if n_events is None else n_events
    kinds: list[int] = []
    for _ in range(n):
        options = [k for k in range(c.K) if all(world.distinct(k, j) for j in kinds)] or list(range(c.K))
        kinds.append(options[int(rng.integers(len(options)))])
    events = []
    for k in kinds:
        onset = float(rng.uniform((), 0.0, 0.7))
        duration = float(rng.uniform((), 0.25, 1.0 - onset)) if 1.0 - onset > 0.25 else 1.0 - onset
        events.append(Event(k, onset, duration, float(rng.uniform((), 0.6, 1.4))))
    return EventScript(tuple(events), c.clip_seconds, 0)


# -- benchmark construction ------------------------------------------------

DIFFICULTY_WEIGHTS = (1.0, 1.0, 1.0, 0.1)


def composite_difficulty(scores: Sequence, weights=DIFFICULTY_WEIGHTS) -> np.ndarray:
    """Higher = harder: alignment scores negated, desync and event count positive."""
    s = np.array([tuple(x.as_tuple() if isinstance(x, Scores) else x) for x in scores], dtype=np.float64)
    ws, wc, wd, wn = weights
    return -ws * s[:, 0] - wc * s[:, 1] + wd * s[:, 2] + wn * s[:, 3]


def assign_difficulty(scores: Sequence, weights=DIFFICULTY_WEIGHTS) -> list[str]:
    """Tertile labels over the composite; ties keep record order."""
    n = len(scores)
    if n < 3:
        raise ContractError(f"difficulty tertiles need at least 3 records, got {n}")
    comp = composite_difficulty(scores, weights)
    order = np.argsort(comp, kind="stable")
    labels = [""] * n
    for rank, idx in enumerate(order):
        labels[idx] = "easy" if rank < n // 3 else "medium" if rank < (2 * n) // 3 else "hard"
    return labels


def band_labels(score) -> dict[str, str]:
    """Per-dimension bands of the benchmark table (reported, not used for labels)."""
    sem, clap, des, n = score.as_tuple() if isinstance(score, Scores) else score
    band = lambda v, hi, lo: "easy" if v >= hi else "medium" if v >= lo else "hard"  # noqa: E731
    return {
        "semantic": band(sem, 0.3, 0.25),
        "clap": band(clap, 0.4, 0.3),
        "desync": "easy" if des < 0.3 else "medium" if des < 0.6 else "hard",
        "events": "easy" if n <= 1 else "medium" if n <= 3 else "hard",
    }


@dataclass
class QCResult:
    kept: list
    regenerated: list
    dropped: list
    ledger: dict = field(default_factory=dict)


def qc_filter(items: Sequence, score: Callable[[object], float], regenerate: Callable[[object], object],
              threshold: float = 0.2) -> QCResult:
    """Keep items scoring >= threshold; regenerate the rest once; drop persistent failures.

    ``regenerated`` lists the regenerated versions (kept or dropped).
    """
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    kept, regenerated, dropped = [], [], []
    first_pass = regen_kept = 0
    for item in items:
        if score(item) >= threshold:
            kept.append(item)
            first_pass += 1
            continue
        fresh = regenerate(item)
        regenerated.append(fresh)
        if score(fresh) >= threshold:
            kept.append(fresh)
            regen_kept += 1
        else:
            dropped.append(fresh)
    ledger = {"input": len(items), "kept": len(kept), "kept_first_pass": first_pass,
              "regenerated": len(regenerated), "regenerated_kept": regen_kept,
              "dropped": len(dropped), "threshold": threshold}
    return QCResult(kept, regenerated, dropped, ledger)


def human_audit_sample(items: Sequence, rng: Rng, fraction: float = 0.05) -> tuple[list, dict]:
    """Uniform sample without replacement of ceil(fraction * n) items."""
    if not 0 < fraction <= 1:
        raise ContractError(f"audit fraction must lie in (0, 1], got {fraction}")
    n = len(items)
    k = min(n, math.ceil(fraction * n - 1e-12))
    idx = sorted(int(i) for i in rng.permutation(n)[:k])
    ledger = {"population": n, "fraction": fraction, "sampled": k, "indices": idx,
              "recalibration_trigger": AUDIT_RECALIBRATION_TRIGGER}
    return [items[i] for i in idx], ledger


def regenerate_cot(record: DatasetRecord, world: World, rng: Rng) -> DatasetRecord:
    """Fresh CoT rendering for a low-alignment record (the 'enhanced prompt' retry)."""
    seed = int(rng.integers(2 ** 62))
    bundle = dataclasses.replace(record.bundle, cot_tokens=render_cot(world, record.script, Rng(seed)))
    return dataclasses.replace(record, bundle=bundle, cot_seed=seed, scores=None)


@dataclass
class BuiltDataset:
    world: World
    records: list[DatasetRecord]
    qc: dict
    audit: dict

    def split(self, name: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == name]

    def manifest(self) -> dict:
        counts = {s: len(self.split(s)) for s in sorted({r.split for r in self.records})}
        diff = {d: sum(r.difficulty == d for r in self.records) for d in DIFFICULTIES}
        return {"records": len(self.records), "splits": counts, "difficulty": diff,
                "qc": self.qc, "audit": self.audit, "world": self.world.config.to_dict()}


def build_dataset(world: World, n: int, seed: int, test_fraction: float = 0.25,
                  qc_threshold: float = 0.2, scorer_seed: int = 0,
                  scripts: Sequence[EventScript] | None = None) -> BuiltDataset:
    """Render, QC-filter, score and label ``n`` records."""
    rng = Rng(seed)
    suite = world.scorer_suite(scorer_seed)
    records = []
    for i in range(n):
        r = rng.spawn(i)
        script = scripts[i % len(scripts)] if scripts else random_script(world, r.spawn("script"))
        split = "test" if i >= n - int(round(test_fraction * n)) else "train"
        records.append(render_record(script, world, r.spawn("render"), split=split))
    regen_rng = rng.spawn("regenerate")
    clap = lambda rec: score_record(rec, suite, world.config.clip_seconds).clap  # noqa: E731
    qc = qc_filter(records, clap, lambda rec: regenerate_cot(rec, world, regen_rng), qc_threshold)
    kept = qc.kept
    for rec in kept:
        rec.scores = score_record(rec, suite, world.config.clip_seconds)
    if len(kept) >= 3:
        for rec, label in zip(kept, assign_difficulty([r.scores for r in kept])):
            rec.difficulty = label
    _, audit = human_audit_sample(kept, rng.spawn("audit"))
    return BuiltDataset(world, kept, qc.ledger, audit)


# -- file format -----------------------------------------------------------

DS_MAGIC = b"FFDS"
DS_VERSION = 1
_BUNDLE_FIELDS = ("video_feats", "sync_feats", "caption_emb", "cot_tokens", "roi_feats",
                  "audio_context", "context_mask")


def _record_bytes(rec: DatasetRecord) -> bytes:
    head = {"script": rec.script.to_dict(), "split": rec.split, "cot_seed": rec.cot_seed}
    out = [pack_string(canonical_json(head))]
    mask = 0
    tensors = []
    for bit, name in enumerate(_BUNDLE_FIELDS):
        v = getattr(rec.bundle, name)
        if v is not None:
            mask |= 1 << bit
            tensors.append(tensor_bytes(np.asarray(v, dtype=np.float32)))
    out.append(bytes([mask]))
    out.extend(tensors)
    out.extend(tensor_bytes(a) for a in (rec.x1, rec.ambient, rec.noise, rec.pad_token))
    out.append(struct.pack("<I", len(rec.event_components)))
    out.extend(tensor_bytes(c) for c in rec.event_components)
    out.append(bytes([255 if rec.difficulty is None else DIFFICULTIES.index(rec.difficulty)]))
    s = rec.scores.as_tuple() if rec.scores is not None else (np.nan,) * 4
    out.append(struct.pack("<4f", *s))
    return b"".join(out)


def dataset_bytes(world: WorldConfig, records: Sequence[DatasetRecord]) -> bytes:
    out = [DS_MAGIC, struct.pack("<I", DS_VERSION), pack_string(canonical_json(world.to_dict())),
           struct.pack("<Q", len(records))]
    out.extend(_record_bytes(r) for r in records)
    return b"".join(out)


def parse_dataset(buf: bytes) -> tuple[WorldConfig, list[DatasetRecord]]:
    r = Reader(buf)
    r.magic(DS_MAGIC)
    at = r.pos
    if (v := r.u32("version")) != DS_VERSION:
        raise FormatError(f"unsupported dataset version {v}", at)
    world = WorldConfig.from_dict(r.json("world config"))
    records = []
    for _ in range(r.u64("record count")):
        head = r.json("record header")
        mask = r.u8("presence mask")
        fields = {}
        for bit, name in enumerate(_BUNDLE_FIELDS):
            if mask >> bit & 1:
                arr = r.tensor()
                fields[name] = arr.astype(bool) if name == "context_mask" else arr
        x1, ambient, noise, pad = r.tensor(), r.tensor(), r.tensor(), r.tensor()
        comps = [r.tensor() for _ in range(r.u32("component count"))]
        at = r.pos
        d = r.u8("difficulty")
        if d != 255 and d >= len(DIFFICULTIES):
            raise FormatError(f"bad difficulty code {d}", at)
        s = struct.unpack("<4f", r.take(16, "scores"))
        scores = None if math.isnan(s[0]) else Scores(s[0], s[1], s[2], int(s[3]))
        records.append(DatasetRecord(
            EventScript.from_dict(head["script"]), ConditionBundle(**fields), x1, comps, ambient, noise,
            pad, scores, None if d == 255 else DIFFICULTIES[d], head["split"], head["cot_seed"]))
    if not r.done():
        raise FormatError("trailing bytes after last record", r.pos)
    return world, records


def save_dataset(path, world: WorldConfig, records: Sequence[DatasetRecord]) -> bytes:
    data = dataset_bytes(world, records)
    Path(path).write_bytes(data)
    return data


def load_dataset(path) -> tuple[WorldConfig, list[DatasetRecord]]:
    return parse_dataset(Path(path).read_bytes())


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
