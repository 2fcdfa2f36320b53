"""Readers and writers for .flo, PFM, PPM (P6) and PGM (P5) files.

Arrays use the package layout ``[C, H, W]``. A PFM holds one channel
(``Pf``) or three (``PF``); maps with other channel counts are written as a
grayscale PFM with the channels stacked vertically (height ``C * H``), and
the caller passes ``channels`` back when reading.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

FLO_MAGIC = b"PIEH"


class FormatError(ValueError):
    pass


def _truncated(what: str, offset: int, expected: int, actual: int) -> FormatError:
    return FormatError(
        f"{what}: truncated at byte offset {offset}: expected {expected} bytes, got {actual}")


def write_flo(path, flow: np.ndarray) -> None:
    """Write ``[2, H, W]`` flow as Middlebury .flo."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FormatError(f".flo needs a [2, H, W] array, got {flow.shape}")
    _, h, w = flow.shape
    body = np.ascontiguousarray(flow.transpose(1, 2, 0)).astype("<f4").tobytes()
    Path(path).write_bytes(FLO_MAGIC + np.array([w, h], dtype="<i4").tobytes() + body)


def read_flo(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise _truncated(str(path), 0, 12, len(buf))
    if buf[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {buf[:4]!r} at byte offset 0")
    w, h = (int(v) for v in np.frombuffer(buf, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid size {w}x{h} at byte offset 4")
    need = 12 + 8 * w * h
    if len(buf) != need:
        raise _truncated(str(path), 12, need - 12, len(buf) - 12) if len(buf) < need else \
            FormatError(f"{path}: {len(buf) - need} trailing bytes after offset {need}")
    data = np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2)
    return data.transpose(2, 0, 1).astype(np.float32)


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[None]
    c, h, w = data.shape
    if c == 3:
        header, img = b"PF", data.transpose(1, 2, 0)
    else:
        header, img = b"Pf", data.reshape(c * h, w)
    rows = img.shape[0]
    body = np.ascontiguousarray(img[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(header + b"\n" + f"{w} {rows}\n-1.0\n".encode() + body)


_PFM_HEADER = re.compile(rb"^(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def read_pfm(path, channels: int | None = None) -> np.ndarray:
    """Read a PFM into ``[C, H, W]``; ``channels`` unstacks a vertical stack."""
    buf = Path(path).read_bytes()
    m = _PFM_HEADER.match(buf)
    if m is None:
        raise FormatError(f"{path}: bad PFM header at byte offset 0")
    color = m.group(1) == b"PF"
    w, rows, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    offset = m.end()
    nch = 3 if color else 1
    need = 4 * w * rows * nch
    if len(buf) - offset < need:
        raise _truncated(str(path), offset, need, len(buf) - offset)
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(buf, dtype=dtype, count=w * rows * nch, offset=offset)
    img = img.reshape(rows, w, nch)[::-1].astype(np.float32)
    if color:
        return np.ascontiguousarray(img.transpose(2, 0, 1))
    img = img[:, :, 0]
    c = channels or 1
    if rows % c:
        raise FormatError(f"{path}: height {rows} is not a multiple of {c} channels")
    return np.ascontiguousarray(img.reshape(c, rows // c, w))


def _read_pnm(path, magic: bytes):
    buf = Path(path).read_bytes()
    m = re.match(rb"^(P\d)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None or m.group(1) != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header at byte offset 0")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit files supported (maxval {maxval})")
    return buf, m.end(), w, h


def write_ppm(path, image: np.ndarray) -> None:
    """Write a ``[3, H, W]`` image in [0, 1] as 8-bit binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"PPM needs a [3, H, W] image, got {image.shape}")
    _, h, w = image.shape
    q = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    buf, off, w, h = _read_pnm(path, b"P6")
    need = 3 * w * h
    if len(buf) - off < need:
        raise _truncated(str(path), off, need, len(buf) - off)
    q = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3)
    return (q.transpose(2, 0, 1) / np.float32(255.0)).astype(np.float32)


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a binary mask: 255 = valid, 0 = invalid."""
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask[0]
    h, w = mask.shape
    q = np.where(mask > 0, 255, 0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a mask PGM into ``[1, H, W]`` with values in {0, 1}."""
    buf, off, w, h = _read_pnm(path, b"P5")
    need = w * h
    if len(buf) - off < need:
        raise _truncated(str(path), off, need, len(buf) - off)
    q = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(1, h, w)
    return (q >= 128).astype(np.float32)


def write_error_map(path, error: np.ndarray, max_value: float | None = None) -> None:
    """Dump a per-pixel error map as 8-bit PGM, linear from 0 to ``max_value``."""
    error = np.asarray(error, dtype=np.float64)
    if error.ndim == 3:
        error = error[0]
    top = float(max_value if max_value is not None else max(error.max(), 1e-12))
    q = np.clip(np.rint(error / top * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q.tobytes())
