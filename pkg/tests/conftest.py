import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fnv1a64_reference(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) % (1 << 64)
    return h
