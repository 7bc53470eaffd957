"""Binary checkpoints: network spec, parameters, momentum buffers, epoch, RNG state.

Layout (little endian)::

    b"MTDC" | u32 version | u64 n + spec text (utf-8, n bytes)
    | u64 epoch | u64 n + RNG state as JSON | u32 parameter count
    | per parameter: u32 n + name, MTD5 tensor
    | u8 has_velocity | per parameter: MTD5 tensor (if present)

Tensors of rank < 5 are stored with leading unit extents and reshaped to
the shape the spec declares on load.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import ConfigurationError, FormatError
from .network import MtdNetwork, build_network, spec_from_text, spec_to_text
from .tensor import read_exact, read_tensor, write_tensor

MAGIC = b"MTDC"
VERSION = 1


@dataclass
class Checkpoint:
    network: MtdNetwork
    velocity: list[np.ndarray] | None
    epoch: int
    rng_state: dict | None

    def restore_rng(self) -> np.random.Generator | None:
        if self.rng_state is None:
            return None
        bitgen = getattr(np.random, self.rng_state["bit_generator"])()
        bitgen.state = self.rng_state
        return np.random.Generator(bitgen)


def _write_blob(f: BinaryIO, data: bytes, width: str = "<Q") -> None:
    f.write(struct.pack(width, len(data)))
    f.write(data)


def _read_blob(f: BinaryIO, width: str = "<Q") -> bytes:
    (n,) = struct.unpack(width, read_exact(f, struct.calcsize(width)))
    return read_exact(f, n)


def checkpoint_bytes(net: MtdNetwork, velocity=None, epoch: int = 0,
                     rng: np.random.Generator | None = None) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC + struct.pack("<I", VERSION))
    _write_blob(f, spec_to_text(net.spec).encode())
    f.write(struct.pack("<Q", epoch))
    state = b"" if rng is None else json.dumps(rng.bit_generator.state, sort_keys=True).encode()
    _write_blob(f, state)
    params = net.parameters()
    f.write(struct.pack("<I", len(params)))
    for p in params:
        _write_blob(f, p.name.encode(), "<I")
        write_tensor(f, p.value)
    f.write(struct.pack("<B", velocity is not None))
    if velocity is not None:
        if len(velocity) != len(params):
            raise ValueError("one momentum buffer per parameter expected")
        for v in velocity:
            write_tensor(f, v)
    return f.getvalue()


def save_checkpoint(path, net: MtdNetwork, velocity=None, epoch: int = 0,
                    rng: np.random.Generator | None = None) -> None:
    data = checkpoint_bytes(net, velocity, epoch, rng)
    with open(path, "wb") as f:
        f.write(data)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    f = io.BytesIO(data)
    if read_exact(f, 4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", read_exact(f, 4))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        spec = spec_from_text(_read_blob(f).decode())
    except (ConfigurationError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad network spec in checkpoint: {exc}") from exc
    (epoch,) = struct.unpack("<Q", read_exact(f, 8))
    state_raw = _read_blob(f)
    rng_state = json.loads(state_raw) if state_raw else None

    net = build_network(spec)
    params = net.parameters()
    (count,) = struct.unpack("<I", read_exact(f, 4))
    if count != len(params):
        raise FormatError(f"checkpoint has {count} parameters, spec declares {len(params)}")

    def _fill(expected_shape, name):
        t = read_tensor(f)
        if t.size != int(np.prod(expected_shape)):
            raise FormatError(f"{name}: stored {t.shape}, expected {expected_shape}")
        return t.reshape(expected_shape)

    for p in params:
        name = _read_blob(f, "<I").decode()
        if name != p.name:
            raise FormatError(f"parameter order mismatch: {name!r} where {p.name!r} expected")
        p.value = _fill(p.shape, name)
    (has_velocity,) = struct.unpack("<B", read_exact(f, 1))
    velocity = [_fill(p.shape, p.name + " velocity") for p in params] if has_velocity else None
    if f.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    return Checkpoint(net, velocity, epoch, rng_state)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
