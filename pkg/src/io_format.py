"""
PSTA tensor archives (``.psta``).

Layout (all integers little-endian; see docs/format.md):

    magic        4 bytes   b"PSTA"
    version      u32       FORMAT_VERSION
    count        u32       number of tensors
    per tensor:
      name_len   u16
      name       name_len bytes, UTF-8
      dtype      u8        0 = float32, 1 = float64
      ndim       u8
      dims       ndim × u32
      data       prod(dims) × itemsize bytes, little-endian, row-major

Reading is strict: every declared size must be backed by the payload and
nothing may follow the last tensor.  float32 payloads widen exactly to
float64 in memory.
"""

from __future__ import annotations

import enum
import logging
import math
import os
import struct
from typing import Dict, Iterable, Mapping, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"PSTA"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sII")

_DTYPES: Dict[int, np.dtype] = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {"f32": 0, "f64": 1}


class ArchiveErrorCode(enum.IntEnum):
    BAD_MAGIC = 1
    TRUNCATED = 2
    DUPLICATE_NAME = 3
    BAD_DTYPE = 4
    BAD_VERSION = 5
    TRAILING_DATA = 6
    BAD_NAME = 7


class ArchiveError(ValueError):
    code: ArchiveErrorCode


class BadMagicError(ArchiveError):
    code = ArchiveErrorCode.BAD_MAGIC


class TruncatedError(ArchiveError):
    code = ArchiveErrorCode.TRUNCATED


class DuplicateNameError(ArchiveError):
    code = ArchiveErrorCode.DUPLICATE_NAME


class BadDtypeError(ArchiveError):
    code = ArchiveErrorCode.BAD_DTYPE


class BadVersionError(ArchiveError):
    code = ArchiveErrorCode.BAD_VERSION


class TrailingDataError(ArchiveError):
    code = ArchiveErrorCode.TRAILING_DATA


class BadNameError(ArchiveError):
    code = ArchiveErrorCode.BAD_NAME


# ── write ─────────────────────────────────────────────────────────────────────

TensorItems = Union[Mapping[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]]


def write_archive(tensors: TensorItems, dtype: str = "f64") -> bytes:
    """Encode *tensors* (a mapping or name/array pairs, in order) as PSTA bytes."""
    if dtype not in _DTYPE_CODES:
        raise BadDtypeError(f"dtype must be one of {', '.join(_DTYPE_CODES)}, got {dtype!r}")
    code = _DTYPE_CODES[dtype]
    items = list(tensors.items() if isinstance(tensors, Mapping) else tensors)
    parts = [HEADER.pack(MAGIC, FORMAT_VERSION, len(items))]
    seen = set()
    for name, tensor in items:
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise BadNameError(f"tensor name too long ({len(raw_name)} bytes)")
        arr = np.array(tensor, dtype=_DTYPES[code], order="C")
        if arr.ndim > 0xFF or any(d > 0xFFFFFFFF for d in arr.shape):
            raise ArchiveError(f"tensor {name!r} has unsupported shape {arr.shape}")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def save_archive(path: str, tensors: TensorItems, dtype: str = "f64") -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    payload = write_archive(tensors, dtype)
    with open(path, "wb") as fh:
        fh.write(payload)
    logger.info("Wrote %s (%d bytes)", path, len(payload))


# ── read ──────────────────────────────────────────────────────────────────────

class _Cursor:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        end = self.pos + n
        if n < 0 or end > len(self._data):
            raise TruncatedError(
                f"archive truncated reading {what}: need {n} bytes at offset {self.pos}, "
                f"only {len(self._data) - self.pos} left"
            )
        chunk = self._data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    @property
    def remaining(self) -> int:
        return len(self._data) - self.pos


def read_archive(data: bytes) -> Dict[str, np.ndarray]:
    """Decode PSTA bytes into an ordered name → float64 array mapping."""
    cur = _Cursor(data)
    if len(data) < 4 or bytes(data[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    _, version, count = cur.unpack(HEADER.format, "header")
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported archive version {version}")

    tensors: Dict[str, np.ndarray] = {}
    for idx in range(count):
        (name_len,) = cur.unpack("<H", f"name length of tensor {idx}")
        try:
            name = bytes(cur.take(name_len, f"name of tensor {idx}")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BadNameError(f"tensor {idx} name is not valid UTF-8") from exc
        if name in tensors:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        code, ndim = cur.unpack("<BB", f"dtype of {name!r}")
        if code not in _DTYPES:
            raise BadDtypeError(f"tensor {name!r} has dtype byte {code}, expected 0 or 1")
        dims = cur.unpack(f"<{ndim}I", f"dims of {name!r}")
        dtype = _DTYPES[code]
        nbytes = math.prod(dims) * dtype.itemsize
        payload = cur.take(nbytes, f"data of {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if cur.remaining:
        raise TrailingDataError(f"{cur.remaining} unexpected bytes after the last tensor")
    return tensors


def load_archive(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    tensors = read_archive(data)
    logger.debug("Read %d tensors from %s", len(tensors), path)
    return tensors
