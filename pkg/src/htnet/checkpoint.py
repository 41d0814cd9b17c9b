"""Binary checkpoint format.

All integers are little-endian u64 except the version (u32)::

    b"HTNC" | version:u32 | config_len | config JSON (utf-8) | tensor_count
    per tensor: name_len | name (utf-8) | rank | dims[rank] | f32 values (row-major)

Tensors are stored in parameter registration order. Values are written as
float32, so a round trip is exact for float32 parameters.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ConfigError, ModelConfig, ModelParams, param_shapes
from .numerics import Tensor

MAGIC = b"HTNC"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


def dumps(params: ModelParams) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    out += struct.pack("<Q", len(cfg)) + cfg
    out += struct.pack("<Q", len(params))
    for name, t in params.items():
        raw = name.encode()
        out += struct.pack("<Q", len(raw)) + raw
        out += struct.pack("<Q", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}Q", *t.data.shape)
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    return bytes(out)


def loads(buf: bytes) -> ModelParams:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("checkpoint is truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    def u64() -> int:
        return struct.unpack("<Q", take(8))[0]

    if take(4) != MAGIC:
        raise CheckpointError("bad magic: not an HTNC checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(take(u64()).decode()))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc

    expected = param_shapes(config)
    tensors = {}
    for _ in range(u64()):
        try:
            name = take(u64()).decode()
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt tensor name") from exc
        rank = u64()
        if rank > 8:
            raise CheckpointError(f"tensor {name!r} has implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        if name not in expected or expected[name][0] != tuple(dims):
            raise CheckpointError(f"tensor {name!r} {dims} does not fit the stored config")
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    missing = [k for k in expected if k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {missing[:3]}")
    return ModelParams(config, {k: tensors[k] for k in expected})


def save(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path: str | Path) -> ModelParams:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(buf)
