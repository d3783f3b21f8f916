"""Binary checkpoint format.

Layout (little-endian)::

    b"TFAD" | version u16 | entry count u16
    per entry: name length u16 | UTF-8 name | rank u8 | extents u32 * rank | f32 data
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"TFAD"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    if len(tensors) > 0xFFFF:
        raise CheckpointFormatError("too many tensors for a u16 entry count")
    out = [MAGIC, struct.pack("<HH", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<HH", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    pos = 8
    tensors: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            tensors[name] = data.reshape(shape).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from exc
    if pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last entry")
    return tensors


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
