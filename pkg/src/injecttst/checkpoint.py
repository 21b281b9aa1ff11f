"""Binary checkpoint format for named float32 tensors.

Layout (all integers little-endian):
    magic  "ITST"
    u32    format version
    u32    tensor count
    per tensor:
        u32    name byte length, then UTF-8 name
        u32    rank
        u64    each dimension
        f32    row-major data
    u32    CRC-32 of all preceding bytes
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CheckpointError
from .numerics import Tensor

MAGIC = b"ITST"
FORMAT_VERSION = 1


def save_checkpoint(params: dict, path: str) -> None:
    """Write tensors sorted by name; values accept Tensor or ndarray."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name in sorted(params):
        value = params[name]
        arr = np.ascontiguousarray(
            (value.data if isinstance(value, Tensor) else value), dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint; verifies magic, version and the trailing CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, crc_bytes = blob[:-4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    if body[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {body[:4]!r}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, offset)
        offset += 4
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", body, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}Q", body, offset)
        offset += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        tensors[name] = arr.astype(np.float32)
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return tensors


def apply_checkpoint(params: dict, loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter dict (strict match)."""
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint name mismatch: missing={missing}, extra={extra}")
    for name, p in params.items():
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"tensor {name}: shape {arr.shape} != {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
