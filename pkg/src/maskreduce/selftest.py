"""Fast oracle checks runnable from the CLI (``maskreduce selftest``)."""
from __future__ import annotations

import struct

import numpy as np

from . import codec, kernels
from .collective import full_allreduce, masked_allreduce
from .model import Mlp
from .sparsity import MaskTracker, Status, enforce_gradient_sparsity, magnitude_prune
from .tensor import SparsityMask
from .transport import LinkModel, Topology, run_simulated


def _fnv_reference(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def check_digest():
    bits = np.random.default_rng(1).random(200) < 0.5
    words = np.packbits(np.concatenate([bits, np.zeros(-len(bits) % 64, bool)]), bitorder="little")
    assert SparsityMask(bits).digest == _fnv_reference(words.tobytes())
    assert SparsityMask.zeros(64).digest == 0xA8C7F832281A39C5


def check_pack_roundtrip():
    rng = np.random.default_rng(2)
    for n in (1, 7, 64, 4096):
        g = rng.standard_normal(n).astype(np.float32)
        mask = SparsityMask(rng.random(n) < 0.5)
        expect = enforce_gradient_sparsity(g, mask)
        got = codec.unpack(codec.pack(g, mask), mask)
        assert got.tobytes() == expect.tobytes()


def check_fp16():
    x = np.random.default_rng(3).standard_normal(1000).astype(np.float32) * 100
    ref = np.array([struct.unpack("<e", struct.pack("<e", float(v)))[0] for v in x], dtype=np.float32)
    assert np.array_equal(codec.fp16_roundtrip(x), ref)


def check_ring():
    rng = np.random.default_rng(4)
    for n in (2, 4):
        inputs = [rng.standard_normal(257).astype(np.float32) for _ in range(n)]
        out = run_simulated(Topology.uniform(n, LinkModel(1e8)), lambda comm, x: full_allreduce(x, comm)[0],
                            [(x,) for x in inputs])
        ref = np.sum(np.array(inputs, dtype=np.float64), axis=0)
        for r in out:
            assert np.allclose(r, ref, rtol=1e-5, atol=1e-5)


def check_packed_ring():
    rng = np.random.default_rng(5)
    mask = magnitude_prune(rng.standard_normal(512), 0.5)
    inputs = [enforce_gradient_sparsity(rng.standard_normal(512), mask) for _ in range(4)]
    out = run_simulated(Topology.uniform(4, LinkModel(1e8)),
                        lambda comm, x: masked_allreduce(x, mask, Status.STABLE, comm, 0)[0], [(x,) for x in inputs])
    ref = np.sum(np.array(inputs, dtype=np.float64), axis=0)
    assert np.allclose(out[0], ref, rtol=1e-5, atol=1e-5)
    assert not np.any(out[0][~mask.bits])


def check_tracker():
    t = MaskTracker(3)
    m = SparsityMask.ones(10)
    assert [t.observe(m) for _ in range(4)][-2:] == [Status.UNSTABLE, Status.STABLE]


def check_gradient():
    rng = np.random.default_rng(6)
    model = Mlp.initialize((5, 7, 3), seed=1)
    batch = (rng.standard_normal((4, 5)), rng.integers(0, 3, 4))
    p = model.params.astype(np.float64)
    _, g = model.loss_and_grad(p, batch)
    for i in rng.choice(len(p), 10, replace=False):
        e = np.zeros_like(p)
        e[i] = 1e-6
        fd = (model.loss_and_grad(p + e, batch)[0] - model.loss_and_grad(p - e, batch)[0]) / 2e-6
        assert abs(fd - g[i]) <= 1e-4 * max(1.0, abs(fd))


CHECKS = [
    ("mask digest matches FNV-1a reference", check_digest),
    ("pack/unpack is lossless", check_pack_roundtrip),
    ("fp16 wire rounding matches IEEE half", check_fp16),
    ("ring all-reduce equals sequential sum", check_ring),
    ("packed all-reduce equals sequential sum", check_packed_ring),
    ("tracker stabilizes after threshold repeats", check_tracker),
    ("backprop matches finite differences", check_gradient),
]


def run(log=print) -> bool:
    ok = True
    log(f"kernel backend: {kernels.BACKEND}")
    for name, fn in CHECKS:
        try:
            fn()
            log(f"PASS  {name}")
        except Exception as exc:  # noqa: BLE001
            ok = False
            log(f"FAIL  {name}: {type(exc).__name__}: {exc}")
    return ok
