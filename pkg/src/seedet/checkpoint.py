"""Checkpoint container: named float64 payloads plus a JSON meta block.

Layout (all integers little-endian):

    magic    8 bytes  b"SEEDCKPT"
    version  u16
    meta_len u32      followed by meta_len bytes of UTF-8 JSON
    count    u32      number of parameter entries
    entry*   u16 name length, name bytes (UTF-8),
             u8 ndim, ndim * u32 dims,
             prod(dims) float64 values, little-endian, C order

Entries are sorted by name and the meta JSON is dumped with sorted keys,
so two checkpoints of identical state are identical byte-for-byte.
Float32 parameters survive the float64 round trip losslessly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

MAGIC = b"SEEDCKPT"
VERSION = 1


class CheckpointFormatError(OSError):
    """Malformed checkpoint payload."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def save_checkpoint(path, params: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f8")
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise ValueError(f"parameter name too long: {name!r}")
            if arr.ndim > 0xFF:
                raise ValueError(f"too many dimensions for {name!r}")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return b


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, 8, "magic") != MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint file")
        version, meta_len = struct.unpack("<HI", _read_exact(f, 6, "header"))
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        try:
            meta = json.loads(_read_exact(f, meta_len, "meta").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"{path}: bad meta block: {e}") from e
        (count,) = struct.unpack("<I", _read_exact(f, 4, "count"))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "dims"))
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = _read_exact(f, 8 * size, f"payload of {name}")
            params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointFormatError(f"{path}: trailing bytes after last entry")
    return Checkpoint(params=params, meta=meta)
