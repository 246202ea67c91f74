"""Ring collectives and the gradient synchronization strategies built on them."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import codec
from .codec import Kind
from .errors import ShapeMismatch
from .sparsity import Status
from .tensor import SparsityMask, as_flat
from .transport import Communicator


class SyncMode(str, enum.Enum):
    FULL = "full"
    FP16 = "fp16"
    TOPK = "topk"
    PACKED = "packed"
    TERNARY = "packed+ternary"


@dataclass(frozen=True)
class SyncStats:
    bytes_on_wire: int
    simulated_seconds: float
    mode_used: SyncMode


def chunk_bounds(length: int, n: int) -> list[tuple[int, int]]:
    """``n`` fixed chunks of ``ceil(length / n)`` elements; trailing chunks may be short or empty."""
    c = math.ceil(length / n) if length else 0
    return [(min(j * c, length), min((j + 1) * c, length)) for j in range(n)]


def _wire_codec(wire):
    if np.dtype(wire) == np.float32:
        return (lambda a: a.astype("<f4").tobytes()), (lambda b: np.frombuffer(b, dtype="<f4").astype(np.float32))
    if np.dtype(wire) == np.float16:
        return (
            lambda a: np.clip(a, -codec.FP16_MAX, codec.FP16_MAX).astype("<f2").tobytes(),
            lambda b: np.frombuffer(b, dtype="<f2").astype(np.float32),
        )
    raise ValueError(f"unsupported wire dtype {wire}")


def ring_allreduce(local, comm: Communicator, wire=np.float32) -> np.ndarray:
    """Elementwise sum across all ranks: reduce-scatter then all-gather, 2(n-1) rounds.

    With ``wire=np.float16`` every hop travels as binary16 and partial sums are
    accumulated in float32 on receipt.
    """
    x = as_flat(local, copy=True)
    n, p = comm.size, comm.position
    bounds = chunk_bounds(len(x), n)
    encode, decode = _wire_codec(wire)

    def chunk(j):
        lo, hi = bounds[j % n]
        return slice(lo, hi)

    for s in range(n - 1):
        got = decode(comm.sendrecv(encode(x[chunk(p - s)])))
        dst = chunk(p - s - 1)
        if len(got) != dst.stop - dst.start:
            raise ShapeMismatch(f"rank {comm.rank} received a chunk of {len(got)}, expected {dst.stop - dst.start}")
        x[dst] += got

    own = chunk(p + 1)
    if np.dtype(wire) != np.float32:
        x[own] = decode(encode(x[own]))

    for s in range(n - 1):
        got = decode(comm.sendrecv(encode(x[chunk(p + 1 - s)])))
        dst = chunk(p - s)
        if len(got) != dst.stop - dst.start:
            raise ShapeMismatch(f"rank {comm.rank} received a chunk of {len(got)}, expected {dst.stop - dst.start}")
        x[dst] = got
    return x


def allgather(payload, comm: Communicator) -> list[bytes]:
    """Every rank ends with every rank's payload, indexed by rank."""
    topo = comm.topology
    n, p = comm.size, comm.position
    out = [b""] * n
    out[comm.rank] = bytes(payload)
    current = out[comm.rank]
    for s in range(n - 1):
        current = comm.sendrecv(current)
        out[topo.ring[(p - s - 1) % n]] = current
    return out


class _Meter:
    def __init__(self, comm):
        self.comm = comm
        self.bytes0 = comm.bytes_sent
        self.t0 = comm.clock.now

    def stats(self, mode):
        return SyncStats(self.comm.bytes_sent - self.bytes0, self.comm.clock.now - self.t0, mode)


def _agree(headers, kind: Kind, mask: SparsityMask) -> bool:
    return all(h.kind == kind and h.mask_digest == mask.digest and h.value_count == mask.nnz for h in headers)


def masked_allreduce(grad, mask: SparsityMask, status: Status, comm: Communicator, epoch: int = 0):
    """Sum a GSE-masked gradient, sending only the mask's survivors when every rank agrees.

    Ranks first all-gather a wire header carrying their mask digest and whether
    their tracker is stable. Only if all headers advertise a stable, identical
    mask is the nnz-length packed buffer ring-reduced; otherwise every rank
    falls back to reducing the full tensor. Returns ``(sum, SyncStats)``.
    """
    meter = _Meter(comm)
    kind = Kind.PACKED if status is Status.STABLE else Kind.FULL
    header = codec.encode_header(kind, epoch, mask.digest, mask.nnz)
    headers = [codec.decode_header(h) for h in allgather(header, comm)]
    if _agree(headers, Kind.PACKED, mask):
        packed = codec.pack(grad, mask, epoch)
        summed = ring_allreduce(packed.values, comm)
        out = codec.unpack(codec.PackedGradient(mask.digest, epoch, summed), mask)
        return out, meter.stats(SyncMode.PACKED)
    return ring_allreduce(grad, comm), meter.stats(SyncMode.FULL)


def ternary_allgather_aggregate(grad, mask: SparsityMask, status: Status, comm: Communicator,
                                seed, epoch: int = 0):
    """Mean gradient from all-gathered ternary payloads of the packed values.

    Each rank packs its gradient under the mask, ternarizes the packed values,
    and all-gathers ``(scale, signs)``. Every rank decodes the ``n`` payloads in
    rank order and averages them. Unstable or disagreeing masks fall back to a
    full-precision ring all-reduce. Returns ``(mean, SyncStats)``.
    """
    meter = _Meter(comm)
    n = comm.size
    if status is Status.STABLE:
        packed = codec.pack(grad, mask, epoch)
        message = codec.encode_ternary(codec.ternarize(packed.values, seed), epoch, mask.digest)
    else:
        message = codec.encode_header(Kind.FULL, epoch, mask.digest, mask.nnz)
    messages = allgather(message, comm)
    headers = [codec.decode_header(m) for m in messages]
    if _agree(headers, Kind.TERNARY, mask):
        acc = np.zeros(mask.nnz, dtype=np.float64)
        for m in messages:
            _, t = codec.decode_ternary(m)
            acc += codec.deternarize(t)
        mean = (acc / n).astype(np.float32)
        out = codec.unpack(codec.PackedGradient(mask.digest, epoch, mean), mask)
        return out, meter.stats(SyncMode.TERNARY)
    summed = ring_allreduce(grad, comm)
    return (summed / np.float32(n)).astype(np.float32), meter.stats(SyncMode.FULL)


def fp16_allreduce(grad, comm: Communicator):
    meter = _Meter(comm)
    return ring_allreduce(grad, comm, wire=np.float16), meter.stats(SyncMode.FP16)


def topk_allgather_aggregate(grad, rate: float, comm: Communicator, epoch: int = 0):
    """Sum of every rank's TopK selection, exchanged with all-gather. Returns ``(sum, SyncStats)``."""
    meter = _Meter(comm)
    g = as_flat(grad)
    message = codec.encode_topk(codec.topk_select(g, rate), epoch)
    acc = np.zeros(len(g), dtype=np.float64)
    for m in allgather(message, comm):
        p = codec.decode_topk(m, len(g))
        acc[p.indices] += p.values
    return acc.astype(np.float32), meter.stats(SyncMode.TOPK)


def full_allreduce(grad, comm: Communicator):
    meter = _Meter(comm)
    return ring_allreduce(grad, comm), meter.stats(SyncMode.FULL)


def synchronize(grad, comm: Communicator, mode: SyncMode, *, mask: SparsityMask | None = None,
                status: Status = Status.UNSTABLE, epoch: int = 0, seed=None, topk_rate: float = 0.1):
    """Average a local gradient across ranks with the requested strategy.

    Returns ``(mean_gradient, SyncStats)``.
    """
    n = np.float32(comm.size)
    mode = SyncMode(mode)
    if mode is SyncMode.TERNARY:
        return ternary_allgather_aggregate(grad, mask, status, comm, seed, epoch)
    if mode is SyncMode.PACKED:
        summed, stats = masked_allreduce(grad, mask, status, comm, epoch)
    elif mode is SyncMode.FP16:
        summed, stats = fp16_allreduce(grad, comm)
    elif mode is SyncMode.TOPK:
        summed, stats = topk_allgather_aggregate(grad, topk_rate, comm, epoch)
    else:
        summed, stats = full_allreduce(grad, comm)
    return (summed / n).astype(np.float32), stats
