"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"RNPC"  u32 version
    u32 n, n bytes   canonical RnpConfig JSON
    u32 n, n bytes   metadata JSON (epoch, optimizer step, RNG state, extras)
    u32 block count
    per block: u32 n, n bytes name; u32 ndim; ndim * u32 dims; prod(dims) * f64
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import RnpConfig, RnpModel

MAGIC = b"RNPC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: RnpConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def checkpoint_from(model: RnpModel, optimizer=None, epoch: int = 0, rng=None, extra=None) -> Checkpoint:
    params = {name: p.data.copy() for name, p in model.named_parameters()}
    ck = Checkpoint(model.config, params, epoch=epoch, extra=dict(extra or {}))
    if optimizer is not None:
        ck.adam_m = {k: v.copy() for k, v in optimizer.m.items()}
        ck.adam_v = {k: v.copy() for k, v in optimizer.v.items()}
        ck.adam_t = optimizer.t
    if rng is not None:
        ck.rng_state = rng.bit_generator.state
    return ck


def restore_model(ck: Checkpoint) -> RnpModel:
    """Rebuild the model and copy the stored parameters in."""
    model = RnpModel.create(ck.config)
    named = model.param_dict()
    missing = set(named) - set(ck.params)
    extra = set(ck.params) - set(named)
    if missing or extra:
        raise CheckpointShapeError(
            f"parameter names differ from config: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    for name, p in named.items():
        values = ck.params[name]
        if values.shape != p.data.shape:
            raise CheckpointShapeError(f"{name}: stored shape {values.shape}, config expects {p.data.shape}")
        p.data[...] = values
    return model


def restore_rng(ck: Checkpoint) -> np.random.Generator:
    rng = np.random.default_rng()
    if ck.rng_state is not None:
        rng.bit_generator.state = ck.rng_state
    return rng


def _pack_bytes(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _blocks(ck: Checkpoint):
    for name in sorted(ck.params):
        yield f"param/{name}", ck.params[name]
    for name in sorted(ck.adam_m):
        yield f"adam_m/{name}", ck.adam_m[name]
    for name in sorted(ck.adam_v):
        yield f"adam_v/{name}", ck.adam_v[name]


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    meta = {"epoch": ck.epoch, "adam_t": ck.adam_t, "rng_state": ck.rng_state, "extra": ck.extra}
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _pack_bytes(ck.config.canonical_json().encode()),
        _pack_bytes(json.dumps(meta, sort_keys=True).encode()),
    ]
    blocks = list(_blocks(ck))
    parts.append(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(_pack_bytes(name.encode()))
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("checkpoint file is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def chunk(self) -> bytes:
        return self.take(self.u32())


def load_checkpoint(path: str | Path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: not an RNP checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        config = RnpConfig.from_dict(json.loads(r.chunk()))
        meta = json.loads(r.chunk())
    except (json.JSONDecodeError, UnicodeDecodeError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from exc
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(r.u32()):
        name = r.chunk().decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        kind, _, pname = name.partition("/")
        if kind not in groups:
            raise CheckpointFormatError(f"{path}: unknown block {name!r}")
        groups[kind][pname] = arr
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{path}: trailing bytes after last block")
    return Checkpoint(
        config,
        groups["param"],
        groups["adam_m"],
        groups["adam_v"],
        adam_t=int(meta.get("adam_t", 0)),
        epoch=int(meta.get("epoch", 0)),
        rng_state=meta.get("rng_state"),
        extra=meta.get("extra", {}),
    )
