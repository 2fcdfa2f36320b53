"""Binary checkpoint format for named parameters and their Adam state.

Layout (little-endian)::

    b"SSGPCKPT"  u32 version  u32 count
    per parameter:
        u16 name_len, utf-8 name, u8 rank, u32 dims[rank],
        f32 value[n], f32 adam_m[n], f32 adam_v[n], u64 step_count
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Parameter

MAGIC = b"SSGPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Sequence[Parameter]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for p in params:
        name = (p.name or "").encode("utf-8")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        for arr in (p.data, p.adam_m, p.adam_v):
            chunks.append(np.asarray(arr, dtype="<f4").tobytes())
        chunks.append(struct.pack("<Q", p.step_count))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> dict[str, Parameter]:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad checkpoint magic at offset 0")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 8")
    out: dict[str, Parameter] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64))
        arrays = [np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
                  for _ in range(3)]
        (steps,) = r.unpack("<Q")
        p = Parameter(arrays[0], name=name)
        p.adam_m, p.adam_v, p.step_count = arrays[1], arrays[2], steps
        out[name] = p
    if r.pos != len(r.buf):
        raise CheckpointError(f"trailing bytes after offset {r.pos}")
    return out


def restore_params(params: Sequence[Parameter], path, reset_optimizer: bool = False) -> None:
    """Copy values (and, unless reset, Adam state) from a checkpoint into ``params``."""
    stored = load_checkpoint(path)
    for p in params:
        if p.name not in stored:
            raise CheckpointError(f"checkpoint lacks parameter {p.name!r}")
        s = stored[p.name]
        if s.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {p.name!r}: {s.shape} vs {p.shape}")
        p.data[...] = s.data
        if reset_optimizer:
            p.adam_m[...] = 0
            p.adam_v[...] = 0
            p.step_count = 0
        else:
            p.adam_m[...] = s.adam_m
            p.adam_v[...] = s.adam_v
            p.step_count = s.step_count
