"""Binary parameter checkpoints.

Layout (little-endian): magic ``BVLA``, format version u32, entry count u32,
then per tensor: name length u32, utf-8 name, rank u32, extents as u64 each,
raw float32 payload. A length-prefixed JSON trailer carries the producing run
configuration so every artifact is self-describing.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

MAGIC = b"BVLA"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Magic/version mismatch or structural nonsense."""


class CheckpointCorruptionError(ValueError):
    """File ends or fails validation mid-record; message carries the offset."""


def save_checkpoint(path: str, params: dict[str, np.ndarray],
                    config: Optional[dict] = None) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(params))
    for name, value in params.items():
        data = np.ascontiguousarray(getattr(value, "data", value), dtype=np.float32)
        raw_name = name.encode("utf-8")
        blob += struct.pack("<I", len(raw_name))
        blob += raw_name
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}Q", *data.shape)
        blob += data.tobytes()
    meta = json.dumps({"config": config}, sort_keys=True).encode("utf-8")
    blob += struct.pack("<Q", len(meta))
    blob += meta
    with open(path, "wb") as f:
        f.write(blob)


def _read(buf: bytes, offset: int, size: int, what: str):
    if offset + size > len(buf):
        raise CheckpointCorruptionError(
            f"checkpoint truncated at byte {offset} while reading {what}")
    return buf[offset:offset + size], offset + size


def load_checkpoint(path: str):
    """Returns (params: dict[str, float32 ndarray], config dict or None)."""
    with open(path, "rb") as f:
        buf = f.read()
    raw, off = _read(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {raw!r}")
    raw, off = _read(buf, off, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    raw, off = _read(buf, off, 4, "entry count")
    count = struct.unpack("<I", raw)[0]
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, off = _read(buf, off, 4, "name length")
        (name_len,) = struct.unpack("<I", raw)
        raw, off = _read(buf, off, name_len, "name")
        name = raw.decode("utf-8")
        raw, off = _read(buf, off, 4, "rank")
        (rank,) = struct.unpack("<I", raw)
        raw, off = _read(buf, off, 8 * rank, "extents")
        shape = struct.unpack(f"<{rank}Q", raw) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        raw, off = _read(buf, off, 4 * size, f"payload of {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    config = None
    if off < len(buf):
        raw, off = _read(buf, off, 8, "metadata length")
        (meta_len,) = struct.unpack("<Q", raw)
        raw, off = _read(buf, off, meta_len, "metadata")
        config = json.loads(raw.decode("utf-8")).get("config")
    return params, config


def assign_params(params: dict[str, "np.ndarray"],
                  targets: dict[str, object]) -> None:
    """Load checkpoint arrays into live tensors, validating names and shapes."""
    missing = set(targets) - set(params)
    extra = set(params) - set(targets)
    if missing or extra:
        raise CheckpointFormatError(
            f"checkpoint does not match model: missing={sorted(missing)[:4]} "
            f"extra={sorted(extra)[:4]}")
    for name, tensor in targets.items():
        value = params[name]
        if tuple(value.shape) != tuple(tensor.data.shape):
            raise CheckpointFormatError(
                f"shape mismatch for {name}: file {value.shape} vs model "
                f"{tensor.data.shape}")
        tensor.data[...] = value.astype(tensor.data.dtype)
