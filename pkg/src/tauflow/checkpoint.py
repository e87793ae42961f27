"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TAUF" | u32 version | u32 config_len | config JSON (utf-8)
    u32 n_tensors
    n_tensors x (u16 name_len | name | u8 ndim | u32 dims[ndim]
                 | u64 offset | u64 nbytes | u32 crc32)
    u64 payload_len | payload (float32 little-endian)

Offsets are relative to the start of the payload.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig, from_json
from .nn import Module

MAGIC = b"TAUF"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    version: int = VERSION


def save_checkpoint(path, model: Module, config: ModelConfig) -> Checkpoint:
    tensors = {name: np.array(arr, dtype="<f4", order="C") for name, arr in model.state_dict().items()}
    cfg_bytes = config.to_json().encode("utf-8")
    header = [MAGIC, struct.pack("<II", VERSION, len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(tensors))]
    offset = 0
    for name, arr in tensors.items():
        raw = arr.tobytes()
        nb = name.encode("utf-8")
        header.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
                      + struct.pack(f"<{arr.ndim}I", *arr.shape)
                      + struct.pack("<QQI", offset, len(raw), zlib.crc32(raw)))
        offset += len(raw)
    payload = b"".join(arr.tobytes() for arr in tensors.values())
    Path(path).write_bytes(b"".join(header) + struct.pack("<Q", len(payload)) + payload)
    return Checkpoint(config=config, tensors=tensors)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at offset {self.pos} while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> Checkpoint:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{p}: cannot read ({exc.strerror})") from exc
    r = _Reader(data, p)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{p}: bad magic {magic!r} at offset 0")
    version, cfg_len = r.unpack("<II", "version")
    if version != VERSION:
        raise CheckpointError(f"{p}: unsupported checkpoint version {version} (expected {VERSION})")
    config = from_json(r.take(cfg_len, "config").decode("utf-8"))
    (count,) = r.unpack("<I", "tensor count")
    manifest = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        offset, nbytes, crc = r.unpack("<QQI", f"{name} manifest entry")
        manifest.append((name, shape, offset, nbytes, crc))
    (payload_len,) = r.unpack("<Q", "payload length")
    payload_start = r.pos
    if len(data) - payload_start != payload_len:
        raise CheckpointError(f"{p}: payload at offset {payload_start} has {len(data) - payload_start} bytes, "
                              f"manifest says {payload_len}")
    tensors = {}
    for name, shape, offset, nbytes, crc in manifest:
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if nbytes != expected or offset + nbytes > payload_len:
            raise CheckpointError(f"{p}: tensor {name} at payload offset {offset} has inconsistent size {nbytes}")
        raw = data[payload_start + offset:payload_start + offset + nbytes]
        if zlib.crc32(raw) != crc:
            raise CheckpointError(f"{p}: checksum mismatch for {name} at offset {payload_start + offset}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return Checkpoint(config=config, tensors=tensors, version=version)


def load_checkpoint(path, model: Module | None = None, config: ModelConfig | None = None):
    """Read a checkpoint and optionally load it into ``model``.

    Without a model, a fresh :class:`~tauflow.model.TauFlow` is built from the
    stored config. Shape disagreements with the runtime model are errors.
    """
    ckpt = read_checkpoint(path)
    if model is None:
        from .model import TauFlow
        model = TauFlow(config or ckpt.config)
    own = dict(model.named_parameters())
    conflicts = [f"{n}: checkpoint {ckpt.tensors[n].shape} vs model {own[n].shape}"
                 for n in own if n in ckpt.tensors and ckpt.tensors[n].shape != own[n].shape]
    if conflicts or set(own) != set(ckpt.tensors):
        missing = sorted(set(own) ^ set(ckpt.tensors))
        raise CheckpointError(f"{path}: shape conflict with runtime config: "
                              + "; ".join(conflicts + [f"unmatched {m}" for m in missing]))
    model.load_state_dict(ckpt.tensors)
    return model, ckpt
