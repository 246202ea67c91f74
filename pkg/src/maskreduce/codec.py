"""Gradient codecs and their wire format.

Every message on the wire starts with a fixed 26-byte little-endian header::

    magic "PACT" | version u8 | kind u8 | epoch u32 | mask_digest u64 | value_count u64

followed by the kind-specific payload.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import CorruptPayload, InvalidRate, MaskMismatch, ShapeMismatch, UndefinedMetric
from .tensor import SparsityMask, as_flat

MAGIC = b"PACT"
VERSION = 1
HEADER = struct.Struct("<4sBBIQQ")
HEADER_SIZE = HEADER.size
FP16_MAX = 65504.0


class Kind(enum.IntEnum):
    FULL = 0
    PACKED = 1
    TERNARY = 2
    FP16 = 3
    TOPK = 4


@dataclass(frozen=True)
class Header:
    kind: Kind
    epoch: int
    mask_digest: int
    value_count: int


@dataclass(frozen=True)
class PackedGradient:
    mask_digest: int
    epoch: int
    values: np.ndarray


@dataclass(frozen=True)
class TernaryGradient:
    signs: np.ndarray  # int8 in {-1, 0, 1}
    scale: float

    def __len__(self):
        return len(self.signs)


@dataclass(frozen=True)
class TopKPayload:
    indices: np.ndarray  # uint32, strictly increasing
    values: np.ndarray
    original_len: int


def pack(grad, mask: SparsityMask, epoch: int = 0) -> PackedGradient:
    """Keep only the mask's surviving values, in ascending index order."""
    g = np.ascontiguousarray(grad, dtype=np.float32)
    if g.ndim != 1 or len(g) != len(mask):
        raise ShapeMismatch(f"gradient of length {g.size} vs mask of length {len(mask)}")
    values = kernels.gather_masked(g, mask.as_uint8())
    return PackedGradient(mask.digest, int(epoch), values)


def unpack(packed: PackedGradient, mask: SparsityMask) -> np.ndarray:
    if packed.mask_digest != mask.digest:
        raise MaskMismatch(f"payload digest {packed.mask_digest:#x} != local mask {mask.digest:#x}")
    if len(packed.values) != mask.nnz:
        raise CorruptPayload(f"{len(packed.values)} packed values for a mask with nnz={mask.nnz}")
    return kernels.scatter_masked(np.ascontiguousarray(packed.values, dtype=np.float32), mask.as_uint8())


def ternarize(grad, seed) -> TernaryGradient:
    """Stochastic unbiased ternary quantization.

    ``scale = max|g|``; element ``i`` becomes ``sign(g_i)`` with probability
    ``|g_i| / scale`` and 0 otherwise, so ``E[scale * sign_i] = g_i``.
    ``seed`` is anything :func:`numpy.random.default_rng` accepts.
    """
    g = as_flat(grad)
    scale = float(np.max(np.abs(g))) if len(g) else 0.0
    uniforms = np.random.default_rng(seed).random(len(g))
    signs = kernels.ternary_signs(g, uniforms, np.float32(scale))
    return TernaryGradient(signs, scale)


def deternarize(t: TernaryGradient) -> np.ndarray:
    return (np.float32(t.scale) * t.signs.astype(np.float32)).astype(np.float32)


def fp16_roundtrip(grad) -> np.ndarray:
    """Round to binary16 (nearest-even), clamping overflow to the largest finite half."""
    g = as_flat(grad)
    return np.clip(g, -FP16_MAX, FP16_MAX).astype(np.float16).astype(np.float32)


def topk_select(grad, rate: float) -> TopKPayload:
    """Keep the ``max(1, floor(rate*len))`` largest-magnitude entries, lower index first on ties."""
    if not (0.0 < rate <= 1.0):
        raise InvalidRate(f"TopK rate must lie in (0, 1], got {rate}")
    g = as_flat(grad)
    n = len(g)
    k = min(n, max(1, math.floor(rate * n)))
    order = np.lexsort((np.arange(n), -np.abs(g)))
    idx = np.sort(order[:k]).astype(np.uint32)
    return TopKPayload(idx, g[idx].copy(), n)


def topk_densify(payload: TopKPayload) -> np.ndarray:
    out = np.zeros(payload.original_len, dtype=np.float32)
    out[payload.indices] = payload.values
    return out


def nmse(x, x_hat) -> float:
    """||x - x_hat||^2 / ||x||^2 as a float32 value."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"shapes {x.shape} and {x_hat.shape}")
    ref = float(np.dot(x, x))
    if ref == 0.0:
        raise UndefinedMetric("NMSE undefined for a zero reference vector")
    diff = x - x_hat
    return float(np.float32(np.dot(diff, diff) / ref))


# --- wire format ---------------------------------------------------------

def encode_header(kind: Kind, epoch: int, mask_digest: int, value_count: int) -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(kind), epoch & 0xFFFFFFFF, mask_digest, value_count)


def decode_header(buf) -> Header:
    buf = bytes(buf[:HEADER_SIZE])
    if len(buf) < HEADER_SIZE:
        raise CorruptPayload(f"message of {len(buf)} bytes is shorter than the header")
    magic, version, kind, epoch, digest, count = HEADER.unpack(buf)
    if magic != MAGIC:
        raise CorruptPayload(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptPayload(f"unsupported version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise CorruptPayload(f"unknown payload kind {kind}") from None
    return Header(kind, epoch, digest, count)


def _expect(buf, kind: Kind, payload_len: int) -> Header:
    h = decode_header(buf)
    if h.kind != kind:
        raise CorruptPayload(f"expected {kind.name} payload, got {h.kind.name}")
    expected = HEADER_SIZE + payload_len if payload_len >= 0 else None
    if expected is not None and len(buf) != expected:
        raise CorruptPayload(f"{kind.name} message is {len(buf)} bytes, expected {expected}")
    return h


def encode_full(grad, epoch: int = 0, mask_digest: int = 0) -> bytes:
    g = as_flat(grad)
    return encode_header(Kind.FULL, epoch, mask_digest, len(g)) + g.astype("<f4").tobytes()


def decode_full(buf) -> np.ndarray:
    h = decode_header(buf)
    _expect(buf, Kind.FULL, 4 * h.value_count)
    return np.frombuffer(bytes(buf[HEADER_SIZE:]), dtype="<f4").astype(np.float32)


def encode_packed(p: PackedGradient) -> bytes:
    values = np.asarray(p.values, dtype="<f4")
    return encode_header(Kind.PACKED, p.epoch, p.mask_digest, len(values)) + values.tobytes()


def decode_packed(buf) -> PackedGradient:
    h = decode_header(buf)
    _expect(buf, Kind.PACKED, 4 * h.value_count)
    values = np.frombuffer(bytes(buf[HEADER_SIZE:]), dtype="<f4").astype(np.float32)
    return PackedGradient(h.mask_digest, h.epoch, values)


def encode_ternary(t: TernaryGradient, epoch: int = 0, mask_digest: int = 0) -> bytes:
    n = len(t.signs)
    body = struct.pack("<f", t.scale) + kernels.pack_signs(np.ascontiguousarray(t.signs, dtype=np.int8)).tobytes()
    return encode_header(Kind.TERNARY, epoch, mask_digest, n) + body


def decode_ternary(buf) -> tuple[Header, TernaryGradient]:
    h = decode_header(buf)
    n = h.value_count
    _expect(buf, Kind.TERNARY, 4 + (n + 3) // 4)
    (scale,) = struct.unpack_from("<f", buf, HEADER_SIZE)
    try:
        signs = kernels.unpack_signs(np.frombuffer(bytes(buf[HEADER_SIZE + 4:]), dtype=np.uint8), n)
    except ValueError as exc:
        raise CorruptPayload(str(exc)) from None
    if not (math.isfinite(scale) and scale >= 0.0):
        raise CorruptPayload(f"invalid ternary scale {scale}")
    if scale == 0.0 and np.any(signs):
        raise CorruptPayload("zero scale with non-zero signs")
    return h, TernaryGradient(signs, scale)


def encode_fp16(grad, epoch: int = 0, mask_digest: int = 0) -> bytes:
    g = as_flat(grad)
    half = np.clip(g, -FP16_MAX, FP16_MAX).astype("<f2")
    return encode_header(Kind.FP16, epoch, mask_digest, len(g)) + half.tobytes()


def decode_fp16(buf) -> np.ndarray:
    h = decode_header(buf)
    _expect(buf, Kind.FP16, 2 * h.value_count)
    return np.frombuffer(bytes(buf[HEADER_SIZE:]), dtype="<f2").astype(np.float32)


def encode_topk(p: TopKPayload, epoch: int = 0, mask_digest: int = 0) -> bytes:
    k = len(p.indices)
    body = np.asarray(p.indices, dtype="<u4").tobytes() + np.asarray(p.values, dtype="<f4").tobytes()
    return encode_header(Kind.TOPK, epoch, mask_digest, k) + body


def decode_topk(buf, original_len: int) -> TopKPayload:
    h = decode_header(buf)
    k = h.value_count
    _expect(buf, Kind.TOPK, 8 * k)
    raw = bytes(buf[HEADER_SIZE:])
    idx = np.frombuffer(raw[:4 * k], dtype="<u4").astype(np.uint32)
    values = np.frombuffer(raw[4 * k:], dtype="<f4").astype(np.float32)
    if k and (idx[-1] >= original_len or np.any(np.diff(idx.astype(np.int64)) <= 0)):
        raise CorruptPayload("TopK indices out of range or not strictly increasing")
    return TopKPayload(idx, values, original_len)
