"""Binary checkpoint store: named float32 arrays, bit-exact round trip.

Layout (all integers unsigned 32-bit little-endian):

    magic "VQDISC1\\0" | array count | per array:
        name length | UTF-8 name | rank | extents... | raw f32 LE data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VQDISC1\x00"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays; values are stored as little-endian float32."""
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        data = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by save_arrays, preserving array order."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = blob[off:off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(shape)
        arrays[name] = data.copy()
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return arrays


def pack_u64(value: int) -> np.ndarray:
    """Bit-cast an unsigned 64-bit value into a 2-float32 array so metadata
    (e.g. a config hash) can travel inside the array store untouched."""
    return np.frombuffer(struct.pack("<Q", value), dtype="<f4").copy()


def unpack_u64(arr: np.ndarray) -> int:
    raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if len(raw) != 8:
        raise CheckpointError("u64 metadata array must hold exactly 2 floats")
    return struct.unpack("<Q", raw)[0]
