"""Pure-Python/numpy implementations of the hot kernels.

Semantics must match ``_ckernels.pyx`` exactly; the test suite runs both.
"""
import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data):
    h = FNV_OFFSET
    for b in bytes(data):
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def gather_masked(values, mask):
    return np.ascontiguousarray(values[mask.view(np.bool_)], dtype=np.float32)


def scatter_masked(packed, mask):
    out = np.zeros(mask.shape[0], dtype=np.float32)
    out[mask.view(np.bool_)] = packed
    return out


def pack_signs(signs):
    n = signs.shape[0]
    codes = np.zeros(-(-n // 4) * 4, dtype=np.uint8)
    codes[:n][signs > 0] = 1
    codes[:n][signs < 0] = 2
    codes = codes.reshape(-1, 4)
    return (codes[:, 0] | (codes[:, 1] << 2) | (codes[:, 2] << 4) | (codes[:, 3] << 6)).astype(np.uint8)


def unpack_signs(buf, n):
    buf = np.asarray(buf, dtype=np.uint8)
    if buf.shape[0] * 4 < n:
        raise ValueError("sign buffer too short")
    codes = np.stack([(buf >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)[:n]
    if np.any(codes == 3):
        raise ValueError("reserved sign code 0b11")
    out = np.zeros(n, dtype=np.int8)
    out[codes == 1] = 1
    out[codes == 2] = -1
    return out


def ternary_signs(grad, uniforms, scale):
    if scale == 0.0:
        return np.zeros(grad.shape[0], dtype=np.int8)
    keep = uniforms < np.abs(grad.astype(np.float64)) / np.float64(scale)
    return (np.sign(grad).astype(np.int8) * keep).astype(np.int8)
