"""Binary array files (NTSR) and 8-bit PGM previews."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"NTSR"
VERSION = 1

PathLike = Union[str, Path]


class FormatError(ValueError):
    """Raised on a bad magic number, unknown version or truncated payload."""


def pack_ntsr(array) -> bytes:
    arr = np.asarray(array)
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_ntsr_from(fh: BinaryIO) -> np.ndarray:
    head = fh.read(12)
    if len(head) < 12:
        raise FormatError("truncated NTSR header")
    if head[:4] != MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    version, ndim = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported NTSR version {version}")
    raw = fh.read(8 * ndim)
    if len(raw) < 8 * ndim:
        raise FormatError("truncated NTSR extents")
    shape = struct.unpack(f"<{ndim}Q", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) < 4 * count:
        raise FormatError(f"truncated NTSR payload: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_ntsr(path: PathLike, array) -> None:
    Path(path).write_bytes(pack_ntsr(array))


def read_ntsr(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_ntsr_from(fh)


def to_gray8(values) -> np.ndarray:
    """Scale a nonnegative 2-D map by its maximum into 0..255."""
    arr = np.asarray(values, dtype=np.float64)
    peak = arr.max() if arr.size else 0.0
    if peak <= 0:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.clip(np.round(arr / peak * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: PathLike, values, normalize: bool = True) -> None:
    """Write a binary (P5) 8-bit PGM; ``normalize`` maps the maximum to 255."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D map, got shape {arr.shape}")
    if normalize:
        gray = to_gray8(arr)
    else:
        gray = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
