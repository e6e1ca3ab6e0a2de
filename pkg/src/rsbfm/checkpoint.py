"""Versioned binary container for chain checkpoints and fitted classifiers.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"RSBF"
    4       4     u32 format version (currently 1)
    8       4     u32 record kind (1 = chain checkpoint, 2 = classifier)
    12      8     u64 payload length in bytes
    20      ...   payload: a sequence of named entries

Each payload entry is::

    u16   name length, then that many bytes of UTF-8 name
    u8    dtype code: 0 = float64, 1 = int64, 2 = UTF-8 text
    u8    ndim
    u64   extent of each dimension (ndim of them)
    ...   raw values in C order (float64/int64 little-endian, text as bytes;
          text entries are 1-d with the byte count as the extent)

Scalars are stored as 0-d arrays.  Readers must ignore unknown entry names.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import StructuralError

MAGIC = b"RSBF"
FORMAT_VERSION = 1
KIND_CHAIN = 1
KIND_CLASSIFIER = 2

_FLOAT, _INT, _TEXT = 0, 1, 2


def _encode_entry(name: str, value) -> bytes:
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name
    if isinstance(value, str):
        body = value.encode("utf-8")
        return head + struct.pack("<BBQ", _TEXT, 1, len(body)) + body
    arr = np.asarray(value)
    if arr.dtype.kind in "biu":
        code, arr = _INT, arr.astype("<i8")
    elif arr.dtype.kind == "f":
        code, arr = _FLOAT, arr.astype("<f8")
    else:
        raise StructuralError(f"cannot serialize entry {name!r} of dtype {arr.dtype}")
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + struct.pack("<BB", code, arr.ndim) + dims + np.ascontiguousarray(arr).tobytes()


def dumps(kind: int, entries: dict) -> bytes:
    payload = b"".join(_encode_entry(k, v) for k, v in entries.items())
    return MAGIC + struct.pack("<IIQ", FORMAT_VERSION, kind, len(payload)) + payload


def loads(blob: bytes) -> tuple[int, dict]:
    if blob[:4] != MAGIC:
        raise StructuralError("not an RSBF file (bad magic bytes)")
    version, kind, length = struct.unpack_from("<IIQ", blob, 4)
    if version != FORMAT_VERSION:
        raise StructuralError(f"unsupported RSBF format version {version}")
    pos = 20
    end = pos + length
    if end > len(blob):
        raise StructuralError("truncated RSBF file")
    entries = {}
    while pos < end:
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        if code == _TEXT:
            entries[name] = blob[pos:pos + count].decode("utf-8")
            pos += count
            continue
        dtype = "<f8" if code == _FLOAT else "<i8"
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
        entries[name] = arr
    return kind, entries


def write(path, kind: int, entries: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(kind, entries))
    os.replace(tmp, path)
    return path


def read(path) -> tuple[int, dict]:
    return loads(Path(path).read_bytes())
