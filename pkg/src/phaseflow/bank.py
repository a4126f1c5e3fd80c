"""Prototype memory bank: one (key, prototype) pair per training demo,
retrieved once per episode by temperature softmax over top-K inner products.

Keys are L2-normalized at build time; the query is used raw, so the
temperature has a stable meaning across banks. File format ``BVMB``: magic,
version u32, D_key u32, D u32, entry count u32, kappa f32, CRC32 of the
packed payload, payload, then a length-prefixed JSON trailer (fingerprint of
the source dataset and the producing config).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Tensor, l2_normalize, linear, silu

MAGIC = b"BVMB"
VERSION = 1


class BankFormatError(ValueError):
    pass


class BankCorruptionError(ValueError):
    pass


class BankStateError(RuntimeError):
    pass


@dataclass
class PrototypeEntry:
    key: np.ndarray      # [D_key] float32, unit norm
    value: np.ndarray    # [D] float32
    task_id: int
    episode_id: str


@dataclass
class MemoryBank:
    entries: list[PrototypeEntry]
    kappa: float
    built_from: str = ""
    config: Optional[dict] = None
    _keys: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("retrieval temperature kappa must be positive")

    @property
    def d_key(self) -> int:
        return self.entries[0].key.shape[0]

    @property
    def d_value(self) -> int:
        return self.entries[0].value.shape[0]

    def key_matrix(self) -> np.ndarray:
        if self._keys is None or self._keys.shape[0] != len(self.entries):
            self._keys = np.stack([e.key for e in self.entries]).astype(np.float64)
        return self._keys

    def fingerprint(self) -> str:
        crc = 0
        for e in self.entries:
            crc = zlib.crc32(e.key.tobytes(), crc)
            crc = zlib.crc32(e.value.tobytes(), crc)
        return f"{crc:08x}"


class QueryHead:
    """The retrieval query map: a 2-layer MLP over the first-frame features."""

    def __init__(self, rng: np.random.Generator, d_model: int,
                 d_key: Optional[int] = None, dtype=np.float64):
        d_key = d_key or d_model
        self.w1 = Tensor(rng.normal(0, 1 / np.sqrt(d_model),
                                    (d_model, d_model)).astype(dtype),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(rng.normal(0, 1 / np.sqrt(d_model),
                                    (d_model, d_key)).astype(dtype),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(d_key, dtype=dtype), requires_grad=True)

    def __call__(self, phi: Tensor) -> Tensor:
        return linear(silu(linear(phi, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def build_bank(encoder, query_head: QueryHead, trajectories, stats,
               kappa: float = 0.1, frame_skip: int = 4,
               built_from: str = "", config: Optional[dict] = None) -> MemoryBank:
    """One entry per demo: key from the first frame, value from the encoded
    (frame-skipped, normalized) trajectory. Deterministic in input order."""
    from .trajectory import normalize_trajectory

    if not trajectories:
        raise BankStateError("cannot build a bank from an empty dataset")
    entries = []
    for traj in trajectories:
        norm = normalize_trajectory(traj, stats)
        view = norm.frame_skip(frame_skip)
        lat = encoder.encode_trajectory(view.obs, view.act, traj.task_id,
                                        times=view.times)
        phi0 = encoder.phi(Tensor(norm.obs[0:1]), np.array([traj.task_id]))
        key = l2_normalize(query_head(phi0), axis=-1).data[0]
        entries.append(PrototypeEntry(
            key=key.astype(np.float32),
            value=lat.z_proto.data.astype(np.float32),
            task_id=traj.task_id, episode_id=traj.episode_id))
    return MemoryBank(entries=entries, kappa=kappa, built_from=built_from,
                      config=config)


def retrieve(bank: MemoryBank, query: np.ndarray, k: int):
    """Top-k by inner product (ties to the lower index), softmax over exactly
    those k scores. Returns (value estimate [D], weights [k], indices [k])."""
    if not bank.entries:
        raise BankStateError("retrieve called on an empty bank")
    if not (1 <= k <= len(bank.entries)):
        raise ValueError(f"k={k} out of range [1, {len(bank.entries)}]")
    query = np.asarray(query, dtype=np.float64)
    if not np.all(np.isfinite(query)):
        raise ValueError("retrieve query has non-finite entries")
    scores = bank.key_matrix() @ query
    order = np.argsort(-scores, kind="stable")  # ties keep lower entry index
    idx = order[:k]
    top = scores[idx] / bank.kappa
    top = top - top.max()
    w = np.exp(top)
    w = w / w.sum()
    values = np.stack([bank.entries[i].value for i in idx]).astype(np.float64)
    return values.T @ w, w, idx


def save_bank(path: str, bank: MemoryBank) -> None:
    if not bank.entries:
        raise BankStateError("refusing to save an empty bank")
    payload = bytearray()
    for e in bank.entries:
        payload += np.ascontiguousarray(e.key, dtype="<f4").tobytes()
        payload += np.ascontiguousarray(e.value, dtype="<f4").tobytes()
        payload += struct.pack("<I", e.task_id)
        raw_id = e.episode_id.encode("utf-8")
        payload += struct.pack("<I", len(raw_id))
        payload += raw_id
    header = MAGIC + struct.pack(
        "<IIIIfI", VERSION, bank.d_key, bank.d_value, len(bank.entries),
        bank.kappa, zlib.crc32(bytes(payload)))
    meta = json.dumps({"built_from": bank.built_from, "config": bank.config},
                      sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<Q", len(meta)))
        f.write(meta)


def load_bank(path: str) -> MemoryBank:
    with open(path, "rb") as f:
        buf = f.read()

    def read(off, size, what):
        if off + size > len(buf):
            raise BankCorruptionError(
                f"bank truncated at byte {off} while reading {what}")
        return buf[off:off + size], off + size

    raw, off = read(0, 4, "magic")
    if raw != MAGIC:
        raise BankFormatError(f"bad bank magic {raw!r}")
    raw, off = read(off, 24, "header")
    version, d_key, d_value, count, kappa, crc = struct.unpack("<IIIIfI", raw)
    if version != VERSION:
        raise BankFormatError(f"unsupported bank version {version}")
    payload_start = off
    entries = []
    for _ in range(count):
        raw, off = read(off, 4 * d_key, "key")
        key = np.frombuffer(raw, dtype="<f4").copy()
        raw, off = read(off, 4 * d_value, "value")
        value = np.frombuffer(raw, dtype="<f4").copy()
        raw, off = read(off, 4, "task id")
        (task_id,) = struct.unpack("<I", raw)
        raw, off = read(off, 4, "episode id length")
        (id_len,) = struct.unpack("<I", raw)
        raw, off = read(off, id_len, "episode id")
        entries.append(PrototypeEntry(key=key, value=value, task_id=task_id,
                                      episode_id=raw.decode("utf-8")))
    actual_crc = zlib.crc32(buf[payload_start:off])
    if actual_crc != crc:
        raise BankCorruptionError(
            f"bank payload CRC mismatch over bytes {payload_start}..{off}: "
            f"stored {crc:08x}, computed {actual_crc:08x}")
    built_from, config = "", None
    if off < len(buf):
        raw, off = read(off, 8, "metadata length")
        (meta_len,) = struct.unpack("<Q", raw)
        raw, off = read(off, meta_len, "metadata")
        meta = json.loads(raw.decode("utf-8"))
        built_from = meta.get("built_from", "")
        config = meta.get("config")
    return MemoryBank(entries=entries, kappa=float(kappa), built_from=built_from,
                      config=config)
