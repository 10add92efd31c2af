"""Binary checkpoints: magic "RRC1", version, config hash, parameters.

Layout (little-endian throughout):

    magic        4 bytes  b"RRC1"
    version      u32      currently 1
    config hash  32 bytes sha256 of the canonical config text
    step         u64      training step counter
    n_entries    u32
    entry*       name_len u32, name utf-8, rank u32, extents u32 * rank,
                 values f64 raw

Entries cover every named parameter followed by its momentum buffer under
the name "momentum:<param>". Values are written as float64, so a reload
reproduces bit-identical forward passes in the 64-bit profile.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from rrcdet.autograd import ParamStore

MAGIC = b"RRC1"
VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed checkpoint or config mismatch."""


@dataclass
class Checkpoint:
    config_hash: bytes
    step: int
    entries: dict[str, np.ndarray]


def _pack_entry(name: str, value: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    head = struct.pack("<I", len(encoded)) + encoded
    head += struct.pack("<I", value.ndim)
    head += struct.pack(f"<{value.ndim}I", *value.shape)
    return head + np.ascontiguousarray(value, dtype="<f8").tobytes()


def save_checkpoint(path: str, store: ParamStore, config_hash: bytes,
                    step: int) -> None:
    entries = []
    for name, tensor in store.items():
        entries.append(_pack_entry(name, tensor.data))
    for name, buf in store.momentum_items():
        entries.append(_pack_entry(f"momentum:{name}", buf))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(config_hash)
        fh.write(struct.pack("<Q", step))
        fh.write(struct.pack("<I", len(entries)))
        for blob in entries:
            fh.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config_hash = raw[8:40]
    step = struct.unpack_from("<Q", raw, 40)[0]
    n_entries = struct.unpack_from("<I", raw, 48)[0]
    pos = 52
    entries = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        entries[name] = values.reshape(shape).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(config_hash=config_hash, step=step, entries=entries)


def apply_checkpoint(store: ParamStore, checkpoint: Checkpoint) -> None:
    """Load parameter and momentum values into an existing store."""
    for name, tensor in store.items():
        if name not in checkpoint.entries:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        value = checkpoint.entries[name]
        if value.shape != tensor.data.shape:
            raise CheckpointError(
                f"parameter {name!r} shape {value.shape} != "
                f"{tensor.data.shape}")
        tensor.data[...] = value
        momentum_name = f"momentum:{name}"
        if momentum_name in checkpoint.entries:
            store.momentum(name)[...] = checkpoint.entries[momentum_name]
