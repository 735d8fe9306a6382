"""Named-array checkpoint container.

Layout (all integers little-endian uint32)::

    b"CINNCKPT" | version | count
    per array: name_len | name (utf-8) | rank | extents... | float32 data
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"CINNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint is corrupt, truncated or incompatible with the network."""


def encode_checkpoint(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {pos}, file has {len(blob)}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic at offset 0: not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset {len(MAGIC)}")
    arrays: dict[str, np.ndarray] = {}
    for k in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of array #{k}"))
        name_off = pos
        try:
            name = take(name_len, f"name of array #{k}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"array #{k} name at offset {name_off} is not utf-8") from None
        (rank,) = struct.unpack("<I", take(4, f"rank of {name!r}"))
        if rank > 4:
            raise CheckpointError(f"array {name!r} has rank {rank} > 4 at offset {pos - 4}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name!r}"))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * size, f"data of {name!r}"), dtype="<f4").reshape(shape)
        arrays[name] = data.astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"trailing bytes after last array at offset {pos}")
    return arrays


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params, path) -> None:
    """Write a network's parameters (or a name->array mapping) to ``path``."""
    arrays = params.state_dict() if hasattr(params, "state_dict") else dict(params)
    atomic_write_bytes(path, encode_checkpoint(arrays))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
