"""FSWT parameter checkpoints.

Layout (all integers little-endian)::

    b"FSWT" | version u16 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | float32 data

Entries are written in mapping order so identical inputs give identical bytes.
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import InputError

MAGIC = b"FSWT"
VERSION = 1
_F32 = np.dtype("<f4")


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    if len(view) < 10 or bytes(view[:4]) != MAGIC:
        raise InputError("not an FSWT checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", view, 4)
    if version != VERSION:
        raise InputError(f"unsupported FSWT version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            if pos + nlen > len(view):
                raise InputError("truncated checkpoint entry name")
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(view):
                raise InputError(f"truncated checkpoint data for {name!r}")
            arr = np.frombuffer(view[pos:pos + nbytes], dtype=_F32).reshape(dims)
            out[name] = arr.astype(np.float32)
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise InputError(f"corrupt checkpoint: {exc}") from None
    if pos != len(view):
        raise InputError(f"{len(view) - pos} trailing bytes after checkpoint entries")
    return out


def save_checkpoint(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(arrays))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            return decode_checkpoint(fh.read())
    except FileNotFoundError:
        raise InputError(f"checkpoint not found: {path}") from None
