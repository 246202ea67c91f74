import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskreduce.errors import DuplicateParam, InvalidView
from maskreduce.tensor import BucketEntry, BucketView, SparsityMask, flatten, mask_digest, unflatten

from conftest import fnv1a64_reference


def test_flatten_concatenates_in_registration_order():
    flat, view = flatten([("a", [1.0, 2.0]), ("b", [3.0])])
    assert flat.dtype == np.float32
    assert flat.tolist() == [1.0, 2.0, 3.0]
    assert view["a"].offset == 0 and view["a"].length == 2
    assert view["b"].offset == 2 and view["b"].length == 1


def test_single_param_is_identity():
    x = np.arange(5, dtype=np.float32)
    flat, view = flatten([("p", x)])
    assert np.array_equal(flat, x)
    assert (view["p"].offset, view["p"].length) == (0, 5)


def test_roundtrip_two_params(rng):
    a = rng.standard_normal(64).astype(np.float32)
    b = rng.standard_normal(128).astype(np.float32)
    flat, view = flatten([("a", a), ("b", b)])
    assert len(flat) == 192
    out = dict(unflatten(flat, view))
    assert np.array_equal(out["a"], a) and np.array_equal(out["b"], b)


def test_roundtrip_seven_params_bit_exact(rng):
    buf = rng.standard_normal(1024).astype(np.float32)
    cuts = np.sort(rng.choice(np.arange(1, 1024), 6, replace=False))
    parts = np.split(buf, cuts)
    flat, view = flatten([(f"p{i}", p) for i, p in enumerate(parts)])
    assert flat.tobytes() == buf.tobytes()
    back = unflatten(flat, view)
    assert [n for n, _ in back] == [f"p{i}" for i in range(7)]
    for (_, t), p in zip(back, parts):
        assert t.tobytes() == p.tobytes()


def test_multidimensional_shapes_survive():
    w = np.arange(6, dtype=np.float32).reshape(2, 3)
    flat, view = flatten([("w", w), ("b", [7.0])])
    assert dict(unflatten(flat, view))["w"].shape == (2, 3)


def test_duplicate_name_rejected():
    with pytest.raises(DuplicateParam):
        flatten([("a", [1.0]), ("a", [2.0])])


def test_unflatten_empty():
    assert unflatten(np.zeros(0, dtype=np.float32), BucketView(())) == []


@pytest.mark.parametrize("entries", [
    (BucketEntry("a", 0, 2, (2,)), BucketEntry("b", 3, 1, (1,))),  # gap
    (BucketEntry("a", 0, 2, (2,)), BucketEntry("b", 1, 2, (2,))),  # overlap
    (BucketEntry("a", 0, 2, (2,)),),  # short coverage
])
def test_unflatten_rejects_bad_views(entries):
    with pytest.raises(InvalidView):
        unflatten(np.zeros(3, dtype=np.float32), BucketView(entries))


@given(st.lists(st.lists(st.floats(width=32, allow_nan=False, allow_infinity=False), min_size=1, max_size=20), min_size=1, max_size=8))
@settings(max_examples=100, deadline=None)
def test_flatten_unflatten_bijection(params):
    named = [(f"p{i}", np.array(p, dtype=np.float32)) for i, p in enumerate(params)]
    flat, view = flatten(named)
    for (_, a), (_, b) in zip(named, unflatten(flat, view)):
        assert a.tobytes() == b.tobytes()


def test_digest_of_all_zero_mask_is_fnv_of_eight_zero_bytes():
    mask = SparsityMask.zeros(64)
    assert mask_digest(mask) == fnv1a64_reference(bytes(8)) == 0xA8C7F832281A39C5
    assert mask.digest == 0xA8C7F832281A39C5


def test_digest_matches_reference_on_packed_words(rng):
    bits = rng.random(200) < 0.5
    # reference packing: bit i -> word i // 64, position i % 64, words little-endian
    words = [0] * 4
    for i, b in enumerate(bits):
        if b:
            words[i // 64] |= 1 << (i % 64)
    raw = b"".join(w.to_bytes(8, "little") for w in words)
    assert SparsityMask(bits).digest == fnv1a64_reference(raw)


def test_digest_deterministic():
    m = SparsityMask(np.arange(100) % 3 == 0)
    assert mask_digest(m) == mask_digest(m) == SparsityMask(m.bits.copy()).digest


def test_single_bit_flip_changes_digest(rng):
    collisions = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 512))
        m = SparsityMask(rng.random(n) < 0.5)
        if m.with_flipped(int(rng.integers(n))).digest == m.digest:
            collisions += 1
    assert collisions == 0


def test_mask_nnz_and_immutability(rng):
    bits = rng.random(1000) < 0.3
    m = SparsityMask(bits)
    assert m.nnz == int(bits.sum())
    with pytest.raises(ValueError):
        m.bits[0] = True
    flipped = m.with_flipped(0)
    assert flipped.nnz == m.nnz + (1 if not bits[0] else -1)
