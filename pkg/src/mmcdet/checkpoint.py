"""``MMCK`` parameter files: magic, u32 version, then one record per tensor.

Record layout (little-endian): u16 name length, UTF-8 name, u8 rank,
u32 per dimension, float32 payload.  Records run to end of file.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMCK"
VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise OSError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise OSError(f"{path}: not an MMCK checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise OSError(f"{path}: unsupported checkpoint version {version}")
    pos, state = 8, {}
    while pos < len(raw):
        (n,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        rank = raw[pos]
        dims = struct.unpack_from(f"<{rank}I", raw, pos + 1)
        pos += 1 + 4 * rank
        count = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(raw, "<f4", count, pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    return state
