"""Checkpoint container.

::

    b"FFCK" | version u32 | header JSON (length-prefixed, canonical)
    | count u32 | count x (name, tensor)          parameters
    | count u32 | count x (name, tensor)          EMA parameters
    [| count u32 | count x (name, tensor)]        Adam moments, iff header["optimizer"]
    | CRC-32 u32 of every preceding byte

The header holds the model config under ``"model"`` plus free-form run
metadata (step counter, train config, RNG seed).
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .mmdit import ModelConfig
from .serialize import Reader, canonical_json, pack_string, tensor_bytes

MAGIC = b"FFCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] | None = None


def _section(entries: dict) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for name in entries:
        value = entries[name]
        out.append(pack_string(name))
        out.append(tensor_bytes(getattr(value, "data", value)))
    return b"".join(out)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = dict(ckpt.meta)
    header["model"] = ckpt.config.to_dict()
    header["optimizer"] = ckpt.optimizer is not None
    body = [MAGIC, struct.pack("<I", VERSION), pack_string(canonical_json(header)),
            _section(ckpt.params), _section(ckpt.ema)]
    if ckpt.optimizer is not None:
        body.append(_section(ckpt.optimizer))
    data = b"".join(body)
    return data + struct.pack("<I", zlib.crc32(data))


def _read_section(r: Reader) -> dict[str, np.ndarray]:
    n = r.u32("section count")
    out = {}
    for _ in range(n):
        name = r.string("parameter name")
        out[name] = r.tensor()
    return out


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12:
        raise FormatError("checkpoint too short", len(buf))
    stored = struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(buf[:-4]) != stored:
        raise FormatError("checkpoint CRC-32 mismatch", len(buf) - 4)
    r = Reader(buf[:-4])
    r.magic(MAGIC)
    at = r.pos
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", at)
    header = r.json("header")
    config = ModelConfig.from_dict(header.pop("model"))
    has_opt = header.pop("optimizer", False)
    params = _read_section(r)
    ema = _read_section(r)
    optimizer = _read_section(r) if has_opt else None
    if not r.done():
        raise FormatError("trailing bytes before CRC", r.pos)
    return Checkpoint(config, params, ema, header, optimizer)


def save(path, ckpt: Checkpoint) -> bytes:
    data = checkpoint_bytes(ckpt)
    Path(path).write_bytes(data)
    return data


def load(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
