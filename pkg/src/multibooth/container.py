"""Versioned binary container for named float32 tensors.

Layout (little-endian throughout):

    magic     4 bytes (file kind, e.g. b"MBCM")
    version   u32
    meta_len  u32, then meta_len bytes of canonical JSON (sorted keys)
    n_tensors u32
    per tensor:
        name_len u16, name bytes (utf-8)
        ndim     u8, then ndim x u32 dims
        byte_len u64, then raw float32 data

Tensors are written in sorted-name order and the JSON is canonical, so
the same content always produces the same bytes. Reads are strict: bad
magic, unknown version, truncation, or trailing bytes all fail loudly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class ContainerError(ValueError):
    """Structurally invalid container file."""


class VersionError(ContainerError):
    """Readable container written by an incompatible format version."""


def write_container(path, magic: bytes, version: int, meta: dict,
                    tensors: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    blob = bytearray()
    blob += magic
    blob += struct.pack("<I", version)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        name_bytes = name.encode()
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        raw = arr.astype("<f4").tobytes()
        blob += struct.pack("<Q", len(raw))
        blob += raw
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError(
                f"truncated container: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def read_container(path, magic: bytes, expected_version: int | None = None):
    """Return (version, meta, tensors) or raise ContainerError/VersionError."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    got_magic = r.take(4)
    if got_magic != magic:
        raise ContainerError(f"bad magic {got_magic!r}, expected {magic!r}")
    version = r.unpack("<I")
    if expected_version is not None and version != expected_version:
        raise VersionError(
            f"container version {version} unsupported (expected {expected_version})"
        )
    meta_len = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt metadata block: {exc}") from exc
    n_tensors = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name_len = r.unpack("<H")
        name = r.take(name_len).decode()
        ndim = r.unpack("<B")
        shape = tuple(r.unpack("<I") for _ in range(ndim))
        byte_len = r.unpack("<Q")
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if byte_len != expected:
            raise ContainerError(
                f"tensor {name!r}: byte length {byte_len} does not match shape {shape}"
            )
        raw = r.take(byte_len)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if r.pos != len(buf):
        raise ContainerError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return version, meta, tensors
