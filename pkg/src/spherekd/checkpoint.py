"""Binary checkpoint serialization.

Layout (all integers little-endian):

    magic            4 bytes  b"STNT"
    version          u32
    fingerprint_len  u32, then that many bytes (hex sha-256 of the canonical
                     architecture config)
    n_tensors        u32, then per tensor:
        name_len u32, name utf-8, rank u32, dims u32 * rank, raw f64 data
    meta_len         u32, then canonical JSON utf-8 holding role, epoch,
                     optimizer scalars, and RNG state
    n_velocities     u32, then velocity tensors in the same record format

A checkpoint round-trips bitwise: save(load(save(x))) writes identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .nets import ArchConfig

MAGIC = b"STNT"
VERSION = 1


def fingerprint_arch(arch: ArchConfig) -> str:
    blob = json.dumps(arch.canonical(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    fingerprint: str
    tensors: dict[str, np.ndarray]
    meta: dict
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ConfigError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _unpack_tensors(reader: _Reader) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    count = reader.u32()
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(dims)
        tensors[name] = data.astype(np.float64)
    return tensors


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    meta_blob = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fp = ckpt.fingerprint.encode("ascii")
    parts = [
        MAGIC,
        struct.pack("<I", ckpt.version),
        struct.pack("<I", len(fp)),
        fp,
        _pack_tensors(ckpt.tensors),
        struct.pack("<I", len(meta_blob)),
        meta_blob,
        _pack_tensors(ckpt.velocities),
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    fingerprint = reader.take(reader.u32()).decode("ascii")
    tensors = _unpack_tensors(reader)
    meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    velocities = _unpack_tensors(reader)
    return Checkpoint(fingerprint, tensors, meta, velocities, version)
