"""Binary PPM (P6) and PGM (P5) images, 8-bit, mapped to floats in [0, 1]."""
from __future__ import annotations

import numpy as np

from .checkpoint import FormatError


def _read_header(data: bytes, magic: bytes) -> tuple[list[int], int]:
    if data[:2] != magic:
        raise FormatError(f"expected binary {magic.decode()} image, got magic {data[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError("truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise FormatError(f"malformed header near byte {pos}")
            fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval")
    if fields[2] != 255:
        raise FormatError(f"only maxval 255 is supported, got {fields[2]}")
    return fields, pos + 1


def _decode(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    (w, h, _), start = _read_header(data, magic)
    n = w * h * channels
    payload = data[start:start + n]
    if len(payload) < n:
        raise FormatError(f"truncated payload: expected {n} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM needs a 3 x H x W image, got {img.shape}")
    _, h, w = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + _quantize(img).transpose(1, 2, 0).tobytes()


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"PGM needs an H x W image, got {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + _quantize(img).tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return _decode(fh.read(), b"P6", 3)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return _decode(fh.read(), b"P5", 1)[0]


def write_ppm(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def write_pgm(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))
