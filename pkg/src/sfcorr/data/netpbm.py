"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..errors import ParseError


def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse 'magic W H maxval' (with # comments); return (W, H, maxval, data offset)."""
    if len(buf) < 2 or buf[:2] != magic:
        raise ParseError(f"expected magic {magic.decode()} but found {buf[:2]!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ParseError("header truncated", pos)
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError(f"expected a decimal number, found {buf[pos:pos + 1]!r}", pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after header", pos)
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise ParseError(f"invalid image size {w}x{h}", start)
    if not 0 < maxval < 256:
        raise ParseError(f"only 8-bit images are supported (maxval {maxval})", start)
    return w, h, maxval, pos


def _decode(buf: bytes, magic: bytes, channels: int) -> tuple[np.ndarray, int]:
    w, h, maxval, off = _read_header(buf, magic)
    need = w * h * channels
    if len(buf) - off < need:
        raise ParseError(f"pixel data truncated: need {need} bytes, have {len(buf) - off}", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return data.reshape(h, w, channels) if channels > 1 else data.reshape(h, w), maxval


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def decode_ppm(buf: bytes) -> np.ndarray:
    """P6 bytes -> float32 array [3, H, W] in [0, 1]."""
    arr, maxval = _decode(buf, b"P6", 3)
    return (arr.astype(np.float32) / maxval).transpose(2, 0, 1).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got {image.shape}")
    q = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = q.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + q.tobytes()


def load_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_image(path, image: np.ndarray) -> None:
    _atomic_write(path, encode_ppm(image))


def decode_pgm(buf: bytes) -> np.ndarray:
    """P5 bytes -> uint8 array [H, W] (raw values, not rescaled)."""
    arr, _ = _decode(buf, b"P5", 1)
    return arr.copy()


def encode_pgm(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"expected [H, W] array, got {values.shape}")
    if values.min(initial=0) < 0 or values.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = values.shape
    return f"P5\n{w} {h}\n255\n".encode() + values.astype(np.uint8).tobytes()


def load_label(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def save_label(path, values: np.ndarray) -> None:
    _atomic_write(path, encode_pgm(values))
