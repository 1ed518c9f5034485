"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PIPC" | version u32 | tensor count u32
    per tensor: name_len u16 | utf-8 name | rank u8 | dims u64 * rank
                | dtype u8 | payload
    crc32 u32 over every preceding byte

dtype tags: 0 float32, 1 uint8 (used for the embedded JSON config),
2 float64.
"""
from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

MAGIC = b"PIPC"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("float64"): 2}
CONFIG_KEY = "__config__"


class FormatError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            arr = arr.astype(np.float32)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        tag = _TAG_OF[arr.dtype]
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not a PIPC checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("checkpoint CRC mismatch; file is corrupted")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            (tag,) = struct.unpack_from("<B", body, pos)
            pos += 1
            if tag not in _TAGS:
                raise FormatError(f"unknown dtype tag {tag} for {name!r}")
            dt = _TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise FormatError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise FormatError("trailing bytes after last tensor")
    return out


def save(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    tensors = dict(tensors)
    if config is not None:
        tensors[CONFIG_KEY] = np.frombuffer(json.dumps(config, sort_keys=True).encode(), dtype=np.uint8)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(tensors))
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as fh:
        tensors = loads(fh.read())
    blob = tensors.pop(CONFIG_KEY, None)
    config = json.loads(bytes(blob).decode()) if blob is not None else None
    return tensors, config
