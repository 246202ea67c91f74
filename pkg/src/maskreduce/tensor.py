"""Flat gradient buckets, the parameter-to-bucket mapping, and sparsity masks.

A flat tensor is a 1-D contiguous ``float32`` numpy array. Every other module
works on these buffers, the way a DDP communication hook only ever sees the
flattened bucket.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DuplicateParam, InvalidView, NumericalFailure, ShapeMismatch


def as_flat(values, *, copy=False) -> np.ndarray:
    """Coerce ``values`` to a finite 1-D float32 buffer."""
    arr = (np.array if copy else np.asarray)(values, dtype=np.float32).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise NumericalFailure("flat tensor contains NaN or Inf")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class BucketEntry:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


@dataclass(frozen=True)
class BucketView:
    entries: tuple[BucketEntry, ...]

    @property
    def size(self) -> int:
        return sum(e.length for e in self.entries)

    def __getitem__(self, name: str) -> BucketEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def slice(self, name: str) -> slice:
        e = self[name]
        return slice(e.offset, e.offset + e.length)

    def validate(self, length: int) -> None:
        pos = 0
        for e in self.entries:
            if e.offset != pos:
                raise InvalidView(f"entry {e.name!r} starts at {e.offset}, expected {pos}")
            if e.length < 0 or int(np.prod(e.shape, dtype=np.int64)) != e.length:
                raise InvalidView(f"entry {e.name!r} shape {e.shape} does not hold {e.length} elements")
            pos += e.length
        if pos != length:
            raise InvalidView(f"view covers {pos} elements, buffer has {length}")


def flatten(named_params) -> tuple[np.ndarray, BucketView]:
    """Concatenate ``(name, tensor)`` pairs in registration order."""
    entries = []
    chunks = []
    seen = set()
    offset = 0
    for name, tensor in named_params:
        if name in seen:
            raise DuplicateParam(name)
        seen.add(name)
        arr = np.asarray(tensor, dtype=np.float32)
        if arr.size == 0:
            raise ShapeMismatch(f"parameter {name!r} is empty")
        entries.append(BucketEntry(name, offset, int(arr.size), tuple(arr.shape)))
        chunks.append(arr.reshape(-1))
        offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)
    return as_flat(flat), BucketView(tuple(entries))


def unflatten(flat: np.ndarray, view: BucketView) -> list[tuple[str, np.ndarray]]:
    view.validate(len(flat))
    return [(e.name, flat[e.offset:e.offset + e.length].reshape(e.shape).copy()) for e in view.entries]


def _digest_bytes(bits: np.ndarray) -> bytes:
    # bit i lives in 64-bit word i // 64 at position i % 64; words little-endian
    packed = np.packbits(bits, bitorder="little")
    pad = (-len(packed)) % 8
    if pad:
        packed = np.concatenate([packed, np.zeros(pad, dtype=np.uint8)])
    return packed.tobytes()


class SparsityMask:
    """Immutable keep/drop bit vector with cached population count and digest."""

    __slots__ = ("_bits", "_nnz", "_digest")

    def __init__(self, bits):
        arr = np.array(bits, dtype=np.bool_).reshape(-1)
        arr.flags.writeable = False
        self._bits = arr
        self._nnz = int(np.count_nonzero(arr))
        self._digest = kernels.fnv1a64(np.frombuffer(_digest_bytes(arr), dtype=np.uint8))

    @classmethod
    def ones(cls, length: int) -> SparsityMask:
        return cls(np.ones(length, dtype=np.bool_))

    @classmethod
    def zeros(cls, length: int) -> SparsityMask:
        return cls(np.zeros(length, dtype=np.bool_))

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def nnz(self) -> int:
        return self._nnz

    @property
    def digest(self) -> int:
        return self._digest

    def as_uint8(self) -> np.ndarray:
        return self._bits.view(np.uint8)

    def with_flipped(self, index: int) -> SparsityMask:
        bits = self._bits.copy()
        bits[index] = not bits[index]
        return SparsityMask(bits)

    def __len__(self):
        return len(self._bits)

    def __eq__(self, other):
        if not isinstance(other, SparsityMask):
            return NotImplemented
        return len(self) == len(other) and bool(np.array_equal(self._bits, other._bits))

    def __hash__(self):
        return hash((len(self), self._digest))

    def __repr__(self):
        return f"SparsityMask(len={len(self)}, nnz={self._nnz}, digest={self._digest:#018x})"


def mask_digest(mask: SparsityMask) -> int:
    """64-bit FNV-1a over the mask's packed bit words (little-endian)."""
    return kernels.fnv1a64(np.frombuffer(_digest_bytes(mask.bits), dtype=np.uint8))


def check_same_length(a, b, what="tensors"):
    if len(a) != len(b):
        raise ShapeMismatch(f"{what} have lengths {len(a)} and {len(b)}")
