"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"KAGP" | u32 version (=1) | u32 record count
    per record: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f64 values
    u32 metadata length | UTF-8 JSON metadata (config snapshot, epoch, optimizer step)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedCheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "to_bytes",
    "from_bytes",
]

MAGIC = b"KAGP"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """Model parameters, Adam moments (``adam.m.*``/``adam.v.*``), config and progress."""

    tensors: dict[str, np.ndarray]
    config: RunConfig
    epoch: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("adam.")}

    def moments(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        m = {k[len("adam.m.") :]: v for k, v in self.tensors.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v.") :]: v for k, v in self.tensors.items() if k.startswith("adam.v.")}
        return m, v


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    meta = {"config": ckpt.config.to_dict(), "epoch": ckpt.epoch, "step": ckpt.step, "extra": ckpt.extra}
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(text)) + text)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic") if len(buf) >= 4 else None
    if magic != MAGIC:
        if magic is None and MAGIC.startswith(buf):
            raise TruncatedCheckpointError("file ends inside the magic number")
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (count,) = r.unpack("<I", "record count")
    tensors: dict[str, np.ndarray] = {}
    for k in range(count):
        (n,) = r.unpack("<H", f"name length of record {k}")
        name = r.take(n, f"name of record {k}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(8 * size, f"values of {name}"), dtype="<f8")
        tensors[name] = data.astype(np.float64).reshape(dims)
    (n,) = r.unpack("<I", "metadata length")
    meta = json.loads(r.take(n, "metadata").decode("utf-8"))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after metadata")
    try:
        config = RunConfig(**meta["config"])
        epoch, step = int(meta["epoch"]), int(meta["step"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed metadata: {exc}") from None
    return Checkpoint(tensors, config, epoch, step, meta.get("extra", {}))


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
