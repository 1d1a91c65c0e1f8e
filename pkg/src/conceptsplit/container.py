"""Versioned binary container for checkpoints, adapter databases and datasets.

Layout (little-endian throughout)::

    magic      8 bytes   b"CSPLIT\\x00\\x01"
    version    u32
    cfg_len    u32, then cfg_len bytes of UTF-8 JSON
    count      u32
    count x array:
        name_len u16, name (UTF-8)
        dtype    u8   (0 = float64, 1 = float32, 2 = int64)
        ndim     u8, then ndim x u32 shape
        raw data, C order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CSPLIT\x00\x01"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def dumps(config: dict, arrays: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise FormatError(f"array {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise FormatError("not a conceptsplit container (bad magic)")
    version, cfg_len = struct.unpack_from("<II", blob, 8)
    if version > VERSION:
        raise FormatError(f"container version {version} is newer than supported version {VERSION}")
    pos = 16
    config = json.loads(blob[pos:pos + cfg_len].decode())
    pos += cfg_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dt = _DTYPES.get(code)
        if dt is None:
            raise FormatError(f"array {name!r}: unknown dtype code {code}")
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise FormatError(f"array {name!r}: truncated data")
        arrays[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize,
                                     offset=pos).reshape(shape).copy()
        pos += nbytes
    return config, arrays


def save_container(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(config, arrays))
    tmp.replace(path)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
