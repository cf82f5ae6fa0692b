"""Bit-exact tensor serialization.

Layout, no padding::

    b"FFT1" | rank: u32 LE | dims: rank x u64 LE | data: f32 LE

The helpers at the bottom (length-prefixed strings, JSON) are shared by the
checkpoint and dataset containers.
"""
from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"FFT1"


def tensor_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    arr = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shape, unlike ascontiguousarray
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def write_tensor(t, sink: BinaryIO) -> int:
    data = tensor_bytes(t)
    sink.write(data)
    return len(data)


class Reader:
    """Cursor over a byte buffer that reports offsets in its errors."""

    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str = "u8") -> int:
        return self.take(1, what)[0]

    def u32(self, what: str = "u32") -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str = "u64") -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f32s(self, n: int, what: str = "f32") -> np.ndarray:
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float32)

    def string(self, what: str = "string") -> str:
        n = self.u32(f"{what} length")
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8", self.pos - n) from exc

    def json(self, what: str = "json"):
        start = self.pos
        text = self.string(what)
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{what} is not valid JSON: {exc.msg}", start) from exc

    def magic(self, expected: bytes) -> None:
        start = self.pos
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", start)

    def tensor(self) -> np.ndarray:
        self.magic(MAGIC)
        rank = self.u32("rank")
        if rank > 32:
            raise FormatError(f"implausible tensor rank {rank}", self.pos - 4)
        dims = [self.u64("dim") for _ in range(rank)]
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        start = self.pos
        if start + 4 * n > len(self.buf):
            raise FormatError(f"tensor data of shape {tuple(dims)} needs {4 * n} bytes, "
                              f"{len(self.buf) - start} left", start)
        return self.f32s(n, "tensor data").reshape(dims)

    def done(self) -> bool:
        return self.pos == len(self.buf)


def read_tensor(source) -> np.ndarray:
    """Read one tensor from bytes or a binary stream (the stream is consumed)."""
    buf = source if isinstance(source, (bytes, bytearray, memoryview)) else source.read()
    r = Reader(bytes(buf))
    out = r.tensor()
    if not r.done():
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after tensor", r.pos)
    return out


def pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(t, fh)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def roundtrip(t) -> np.ndarray:
    buf = io.BytesIO()
    write_tensor(t, buf)
    return read_tensor(buf.getvalue())
