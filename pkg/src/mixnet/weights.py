"""Named parameter tables and the binary weight-file format.

File layout, all integers little-endian, no padding::

    b"MIXW" | u32 version (=1) | u32 tensor count
    repeated: u16 name length | UTF-8 name | u8 rank | rank x u32 extents
              | prod(extents) x float32
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import (
    BadMagicError,
    SchemaMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
    WeightFormatError,
)
from .tensor import Parameter

MAGIC = b"MIXW"
VERSION = 1


class WeightStore(Mapping):
    """Ordered name -> :class:`Parameter` table."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        for p in params:
            self.add(p)

    def add(self, p: Parameter) -> None:
        if p.name in self._params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def num_scalars(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data) for k, p in self._params.items())

    def copy(self) -> "WeightStore":
        return WeightStore(Parameter(p.data, name=k) for k, p in self._params.items())

    def equals(self, other: "WeightStore") -> bool:
        """Bitwise comparison of names, shapes and values."""
        if list(self) != list(other):
            return False
        return all(a.data.dtype == b.data.dtype and a.data.shape == b.data.shape
                   and a.data.tobytes() == b.data.tobytes()
                   for a, b in zip(self.values(), other.values()))

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "WeightStore":
        return cls(Parameter(v, name=k) for k, v in arrays.items())


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise WeightFormatError(f"tensor {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise TruncatedFileError(
                f"file truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                f"{len(self.buf) - self.pos} left")
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    """Parse a weight file into float32 arrays, validating framing only."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFormatError(f"cannot read weight file {path}: {exc.strerror}") from None
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}, expected {VERSION}")
    (count,) = r.unpack("<I", "tensor count")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(nlen, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFormatError(f"{path}: tensor {i} name is not valid UTF-8") from None
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        shape = r.unpack(f"<{rank}I", f"extents of {name!r}")
        numel = int(np.prod(shape, dtype=np.int64))
        data = r.take(4 * numel, f"data of {name!r}")
        if name in out:
            raise WeightFormatError(f"{path}: duplicate tensor name {name!r}")
        out[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(buf):
        raise WeightFormatError(f"{path}: {len(buf) - r.pos} trailing bytes after last tensor")
    return out


def check_schema(arrays: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]]) -> None:
    extra = [k for k in arrays if k not in expected]
    missing = [k for k in expected if k not in arrays]
    mismatched = [k for k in expected if k in arrays and tuple(arrays[k].shape) != tuple(expected[k])]
    if extra or missing or mismatched:
        parts = []
        if extra:
            parts.append("unexpected tensors: " + ", ".join(extra))
        if missing:
            parts.append("missing tensors: " + ", ".join(missing))
        if mismatched:
            parts.append("shape mismatch: " + ", ".join(
                f"{k} {tuple(arrays[k].shape)} != {tuple(expected[k])}" for k in mismatched))
        raise SchemaMismatchError("; ".join(parts), extra, missing, mismatched)


def save_weights(store: WeightStore, path) -> None:
    write_tensors(path, store.arrays())


def load_weights(path, cfg=None) -> WeightStore:
    """Load a weight file; with ``cfg``, require exactly that config's name/shape set."""
    arrays = read_tensors(path)
    if cfg is not None:
        from .model import param_shapes

        check_schema(arrays, param_shapes(cfg))
    return WeightStore.from_arrays(arrays)
