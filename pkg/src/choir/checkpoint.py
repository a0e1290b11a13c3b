"""Versioned binary checkpoint files.

Layout (little-endian)::

    b"CHOIRCKPT"  u32 version  u32 count
    count x [u16 name_len, name bytes, u8 rank, rank x u64 extent, float64 values]

Rank-0 entries carry named scalar hyperparameters next to the weights.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CHOIRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a CHOIR checkpoint")
    pos = len(MAGIC)
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, reader supports {VERSION}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(buf, dtype="<f8", count=n, offset=pos)
            pos += 8 * n
            out[name] = values.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
