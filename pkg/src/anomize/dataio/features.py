"""AZF1 binary feature files.

Layout (little-endian): 4-byte magic ``AZF1``, u32 frame count ``n``, u32
dimension ``d``, u32 reserved (zero), then ``n*d`` float32 values row-major.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"AZF1"
HEADER = struct.Struct("<4sIII")


class FeatureFormatError(ValueError):
    """Malformed feature file; the message carries the byte offset."""


def encode_features(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FeatureFormatError("refusing to write non-finite values")
    n, d = x.shape
    return HEADER.pack(MAGIC, n, d, 0) + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_features(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < HEADER.size:
        raise FeatureFormatError(f"{source}: truncated header at byte {len(raw)}")
    magic, n, d, _ = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FeatureFormatError(f"{source}: bad magic {magic!r} at byte 0")
    expected = HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise FeatureFormatError(
            f"{source}: payload truncated or oversized, header says {n}x{d} "
            f"({expected} bytes) but file ends at byte {len(raw)}")
    x = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(n, d).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(x.reshape(-1)))
    if bad.size:
        raise FeatureFormatError(f"{source}: non-finite value at byte {HEADER.size + 4 * int(bad[0])}")
    return x


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_feature_file(path: str | os.PathLike, x) -> None:
    data = x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else x
    atomic_write_bytes(path, encode_features(np.asarray(data)))


def read_feature_file(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    return decode_features(path.read_bytes(), str(path))
