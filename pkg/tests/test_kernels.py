"""Both kernel backends must agree bit-for-bit."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from maskreduce import kernels

from conftest import fnv1a64_reference

BACKENDS = kernels.backends()


@pytest.fixture(params=sorted(BACKENDS))
def impl(request):
    return BACKENDS[request.param]


def test_compiled_backend_is_built():
    # the package is expected to ship with the extension; fallback is for broken toolchains
    assert "cython" in BACKENDS


def test_fnv_matches_reference(impl, rng):
    for n in (0, 1, 8, 1000):
        data = rng.integers(0, 256, n, dtype=np.uint8)
        assert impl.fnv1a64(data) == fnv1a64_reference(data.tobytes())


def test_gather_scatter_roundtrip(impl, rng):
    values = rng.standard_normal(1000).astype(np.float32)
    mask = (rng.random(1000) < 0.4).astype(np.uint8)
    packed = impl.gather_masked(values, mask)
    assert np.array_equal(packed, values[mask.astype(bool)])
    out = impl.scatter_masked(packed, mask)
    assert np.array_equal(out, np.where(mask.astype(bool), values, 0))


def test_sign_codes_layout(impl):
    # codes 00->0, 01->+1, 10->-1, packed little-endian within each byte
    buf = impl.pack_signs(np.array([1, -1, 0, 1, -1], dtype=np.int8))
    assert buf.tolist() == [0b01_00_10_01, 0b10]
    assert impl.unpack_signs(buf, 5).tolist() == [1, -1, 0, 1, -1]


def test_reserved_code_rejected(impl):
    with pytest.raises(ValueError):
        impl.unpack_signs(np.array([0b11], dtype=np.uint8), 1)


@given(hnp.arrays(np.int8, st.integers(0, 300), elements=st.integers(-1, 1)))
@settings(max_examples=200, deadline=None)
def test_backends_agree_on_signs(signs):
    outs = [b.pack_signs(signs) for b in BACKENDS.values()]
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])
    for b in BACKENDS.values():
        assert np.array_equal(b.unpack_signs(outs[0], len(signs)), signs)


@given(hnp.arrays(np.float32, st.integers(1, 200), elements=st.floats(-10, 10, width=32)), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_backends_agree_on_ternary_signs(grad, seed):
    u = np.random.default_rng(seed).random(len(grad))
    scale = np.float32(np.max(np.abs(grad)))
    outs = [b.ternary_signs(grad, u, scale) for b in BACKENDS.values()]
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])


def test_benchmark_runs_and_backends_agree():
    import importlib.util
    import pathlib

    path = pathlib.Path(__file__).resolve().parent.parent / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    bench = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(bench)
    lines = []
    results = bench.run(length=1000, repeat=1, log=lines.append)
    assert set(results) == {"fnv1a64", "gather_masked", "scatter_masked", "pack_signs", "unpack_signs",
                            "ternary_signs"}
    assert all(set(t) == set(BACKENDS) for t in results.values())
