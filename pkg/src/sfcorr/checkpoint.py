"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"SFCK"  u16 version  u64 config_hash  u32 n_entries
    n_entries x { u16 name_len, name (utf-8), u8 dtype_code, u8 rank,
                  rank x u32 dims, payload (little-endian, row-major) }
    u32 CRC32 of every preceding byte

Files are written to a temporary sibling and renamed into place, so a killed
writer never leaves a loadable partial file.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SFCK"
VERSION = 1
_HEADER = struct.Struct("<4sHQI")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1"), 5: np.dtype("<i4")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class CheckpointError(DataError):
    pass


def encode(entries: dict[str, np.ndarray], config_hash: int) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, config_hash, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], int]:
    if len(blob) < _HEADER.size + 4:
        raise CheckpointError(f"checkpoint truncated ({len(blob)} bytes)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch; file is corrupt")
    magic, version, config_hash, n = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {VERSION}")
    pos = _HEADER.size
    entries: dict[str, np.ndarray] = {}
    try:
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dt = _DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(body):
                raise CheckpointError(f"entry {name!r} runs past the end of the file")
            entries[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed entry table at byte {pos}: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after entry table")
    return entries, config_hash


def save(path, entries: dict[str, np.ndarray], config_hash: int) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(entries, config_hash))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict[str, np.ndarray], int]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(blob)
