"""On-disk embedding dumps.

Layout: magic ``LCOE``, u16 version (=1), u8 dtype code (1 = float32 LE),
u32 dim, u64 count, u32-length-prefixed UTF-8 modality tag, then exactly
count * dim * 4 payload bytes. All integers little-endian. Values are
stored in 32-bit; analysis code widens to 64-bit on read.
"""

from __future__ import annotations

import struct
from typing import Tuple

import numpy as np

__all__ = ["EmbDumpError", "write_emb", "read_emb"]

_MAGIC = b"LCOE"
_VERSION = 1
_DTYPE_F32 = 1


class EmbDumpError(Exception):
    """Raised for malformed or truncated embedding dumps."""


def write_emb(path, modality: str, vectors: np.ndarray) -> None:
    v = np.ascontiguousarray(vectors, dtype="<f4")
    if v.ndim != 2:
        raise ValueError("vectors must be 2-d")
    tag = modality.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<B", _DTYPE_F32))
        fh.write(struct.pack("<I", v.shape[1]))
        fh.write(struct.pack("<Q", v.shape[0]))
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        fh.write(v.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise EmbDumpError(f"truncated embedding dump while reading {what}")
    return data


def read_emb(path) -> Tuple[str, np.ndarray]:
    """Returns (modality tag, vectors as float64)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise EmbDumpError("bad magic: not an embedding dump")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != _VERSION:
            raise EmbDumpError(f"unsupported dump version {version}")
        (dtype_code,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
        if dtype_code != _DTYPE_F32:
            raise EmbDumpError(f"unknown dtype code {dtype_code}")
        (dim,) = struct.unpack("<I", _read_exact(fh, 4, "dim"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "count"))
        (tag_len,) = struct.unpack("<I", _read_exact(fh, 4, "tag length"))
        tag = _read_exact(fh, tag_len, "modality tag").decode("utf-8")
        payload = _read_exact(fh, count * dim * 4, "payload")
        if fh.read(1):
            raise EmbDumpError("payload length mismatch: trailing bytes")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return tag, vectors.astype(np.float64)
