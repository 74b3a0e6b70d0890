"""Binary container for named float64 arrays.

Layout (little-endian)::

    magic      4 bytes    b"GMMF" (checkpoints) or b"GMMS" (embedding stores)
    version    u32
    header     u32 length + UTF-8 JSON
    count      u32
    records    count x (u32 path length, path, u32 ndim, ndim x u64 dims, float64 payload)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"GMMF"
STORE_MAGIC = b"GMMS"


class ContainerError(ValueError):
    pass


def encode(magic: bytes, header: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    head = json.dumps(header, sort_keys=True).encode()
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(head)), head, struct.pack("<I", len(arrays))]
    for path, value in arrays.items():
        a = np.ascontiguousarray(value, dtype="<f8")
        name = path.encode()
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:4] != magic:
        raise ContainerError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    pos = 4
    try:
        version, head_len = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != FORMAT_VERSION:
            raise ContainerError(f"unsupported container version {version}")
        header = json.loads(blob[pos : pos + head_len].decode())
        pos += head_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            path = blob[pos : pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(blob):
                raise ContainerError(f"truncated payload for {path!r}")
            arrays[path] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from None
    if pos != len(blob):
        raise ContainerError(f"{len(blob) - pos} trailing bytes")
    return header, arrays


def write(path: str | Path, magic: bytes, header: Mapping, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(magic, header, arrays))
    tmp.replace(path)
    return path


def read(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
