"""Binary checkpoint format.

Layout, all integers little-endian::

    b"SMCK"  u32 version
    u32 len, UTF-8 run config text
    u32 stage_idx, u32 epoch, u32 step       (training position)
    u32 count, tensor * count                 (parameters)
    u64 adam_t, u32 count, (tensor m, tensor v) * count
    u32 len, UTF-8 JSON trainer state         (rng state, permutation, scale plan, loss history)

A tensor is ``u32 name_len, name, u32 rank, u32 dims[rank], f32 data``.
Adam moments are stored under their parameter's name.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, RunConfig, parse_run_config, serialize_run_config
from .model import SamMamba
from .pnm import atomic_write_bytes
from .train import AdamState

__all__ = [
    "MAGIC",
    "VERSION",
    "CheckpointError",
    "BadMagicError",
    "VersionError",
    "TruncatedCheckpointError",
    "ShapeMismatchError",
    "Checkpoint",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "load_backbone_weights",
]

MAGIC = b"SMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)
    trainer: dict = field(default_factory=dict)
    position: tuple[int, int, int] = (0, 0, 0)  # stage_idx, epoch, step


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u32(self, v: int):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v: int):
        self.parts.append(struct.pack("<Q", v))

    def blob(self, data: bytes):
        self.u32(len(data))
        self.parts.append(data)

    def tensor(self, name: str, arr: np.ndarray):
        self.blob(name.encode("utf-8"))
        self.u32(arr.ndim)
        for d in arr.shape:
            self.u32(d)
        self.parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def tensor(self, expected: dict[str, tuple[int, ...]] | None) -> tuple[str, np.ndarray]:
        name = self.blob().decode("utf-8")
        rank = self.u32()
        shape = tuple(self.u32() for _ in range(rank))
        if expected is not None:
            if name not in expected:
                raise CheckpointError(f"unexpected tensor {name}")
            if shape != expected[name]:
                raise ShapeMismatchError(f"shape mismatch for {name}: file declares {shape}, config needs {expected[name]}")
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, data.copy()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    w = _Writer()
    w.parts.append(MAGIC)
    w.u32(VERSION)
    w.blob(serialize_run_config(ckpt.config).encode("utf-8"))
    for v in ckpt.position:
        w.u32(v)
    w.u32(len(ckpt.params))
    for name, arr in ckpt.params.items():
        w.tensor(name, np.asarray(arr))
    w.u64(ckpt.adam.t)
    w.u32(len(ckpt.adam.m))
    for name, m in ckpt.adam.m.items():
        w.tensor(name, np.asarray(m))
        w.tensor(name, np.asarray(ckpt.adam.v[name]))
    w.blob(json.dumps(ckpt.trainer, sort_keys=True).encode("utf-8"))
    return w.bytes()


def _expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: p.shape for name, p in SamMamba(cfg).named_parameters()}


def decode_checkpoint(buf: bytes, validate: bool = True) -> Checkpoint:
    """Parse checkpoint bytes; with ``validate`` every shape is checked against the stored config."""
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    config = parse_run_config(r.blob().decode("utf-8"))
    position = (r.u32(), r.u32(), r.u32())
    expected = _expected_shapes(config.model) if validate else None
    params = dict(r.tensor(expected) for _ in range(r.u32()))
    if expected is not None and set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing)}")
    adam = AdamState(t=r.u64())
    for _ in range(r.u32()):
        name, m = r.tensor(expected)
        name_v, v = r.tensor(expected)
        if name_v != name:
            raise CheckpointError(f"moment pair mismatch: {name} / {name_v}")
        adam.m[name], adam.v[name] = m, v
    trainer = json.loads(r.blob().decode("utf-8"))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(config, params, adam, trainer, position)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(ckpt))


def load_checkpoint(path, validate: bool = True) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), validate)


def model_from_checkpoint(ckpt: Checkpoint, dtype=None) -> SamMamba:
    """Rebuild the model described by ``ckpt`` and load its weights."""
    model = SamMamba(ckpt.config.model)
    if dtype is not None:
        for p in model.parameters():
            p.data = p.data.astype(dtype)
    model.load_state_dict(ckpt.params)
    return model


def load_backbone_weights(model: SamMamba, path) -> None:
    """Copy ``backbone.*`` tensors from an externally supplied checkpoint file."""
    ckpt = load_checkpoint(path, validate=False)
    own = {n: p for n, p in model.named_parameters() if n.startswith("backbone.")}
    for name, p in own.items():
        if name not in ckpt.params:
            raise CheckpointError(f"backbone tensor {name} missing from {path}")
        arr = ckpt.params[name]
        if arr.shape != p.shape:
            raise ShapeMismatchError(f"shape mismatch for {name}: file {arr.shape}, model {p.shape}")
        p.data = arr.astype(p.dtype)
