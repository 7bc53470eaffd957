"""Rank-5 tensors (batch, channel, time, height, width) on top of numpy.

Tensors are plain C-contiguous ``float64`` ndarrays; this module only adds
shape validation, seeded initialisation, channel concatenation and the
``MTD5`` binary format.
"""
from __future__ import annotations

import hashlib
import io
import struct
from typing import BinaryIO, NamedTuple, Sequence

import numpy as np

from .errors import FormatError, ShapeError, SizeError

MAGIC = b"MTD5"
FORMAT_VERSION = 1
_INDEX_MAX = np.iinfo(np.int64).max
_HEADER = struct.Struct("<4sI5Q")


class Shape5(NamedTuple):
    batch: int
    channels: int
    time: int
    height: int
    width: int

    @classmethod
    def of(cls, dims: Sequence[int]) -> "Shape5":
        if len(dims) != 5:
            raise ShapeError(f"expected 5 extents, got {len(dims)}")
        shape = cls(*(int(d) for d in dims))
        shape.validate()
        return shape

    def validate(self) -> None:
        if any(d < 1 for d in self):
            raise ShapeError(f"all extents must be >= 1, got {tuple(self)}")
        count = 1
        for d in self:
            count *= d
            if count > _INDEX_MAX:
                raise SizeError(f"element count of {tuple(self)} overflows int64")

    @property
    def size(self) -> int:
        n = 1
        for d in self:
            n *= d
        return n


def as_tensor5(x) -> np.ndarray:
    """Validate ``x`` as a finite rank-5 float64 array (copying only if needed)."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 5:
        raise ShapeError(f"expected a rank-5 tensor, got rank {arr.ndim}")
    Shape5.of(arr.shape)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("tensor contains non-finite values")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the stream is identical across platforms for a seed."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(Shape5.of(shape), dtype=np.float64)


def randn(shape: Sequence[int], rng: np.random.Generator, std: float = 1.0) -> np.ndarray:
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    shape = Shape5.of(shape)
    return rng.standard_normal(shape, dtype=np.float64) * std


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if len(parts) == 0:
        raise ValueError("concat_channels needs at least one part")
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.ndim != 5:
            raise ShapeError(f"part {i} has rank {p.ndim}, expected 5")
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(
                f"part {i} shape {p.shape} disagrees with {ref} outside the channel axis")
    return np.concatenate(parts, axis=1)


def channel_bands(channels: Sequence[int]) -> list[slice]:
    """Slices locating each part's band inside a channel concatenation."""
    bands, start = [], 0
    for c in channels:
        bands.append(slice(start, start + c))
        start += c
    return bands


# -- binary format -----------------------------------------------------------

def write_tensor(f: BinaryIO, x: np.ndarray) -> None:
    """Write ``x`` as MTD5. Arrays of rank < 5 get leading unit extents."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > 5:
        raise ShapeError(f"cannot store rank-{arr.ndim} array")
    dims = (1,) * (5 - arr.ndim) + arr.shape
    f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, *dims))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic, version, *dims = _HEADER.unpack(read_exact(f, _HEADER.size))
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    try:
        shape = Shape5.of(dims)
    except (ShapeError, SizeError) as exc:
        raise FormatError(str(exc)) from exc
    payload = read_exact(f, 8 * shape.size)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(x: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    x = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return x


def save_tensor(path, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        x = read_tensor(f)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
    return x


def derive_seed(seed: int, *keys) -> int:
    """Stable 64-bit seed for a named sub-stream (independent of Python's hash salt)."""
    h = hashlib.blake2b(repr((int(seed),) + keys).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")
