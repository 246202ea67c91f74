# cython: language_level=3
"""Compiled hot kernels. Semantics mirror ``_pykernels``."""
import numpy as np

from libc.stdint cimport int8_t, uint8_t, uint32_t, uint64_t


def fnv1a64(const uint8_t[::1] data):
    cdef uint64_t h = 0xCBF29CE484222325ULL
    cdef Py_ssize_t i
    for i in range(data.shape[0]):
        h ^= data[i]
        h *= 0x100000001B3ULL
    return h


def gather_masked(const float[::1] values, const uint8_t[::1] mask):
    cdef Py_ssize_t i, j = 0, n = values.shape[0], nnz = 0
    for i in range(n):
        nnz += mask[i] != 0
    # one spare slot lets the loop store unconditionally (branch-free on random masks)
    out = np.empty(nnz + 1, dtype=np.float32)
    cdef float[::1] o = out
    for i in range(n):
        o[j] = values[i]
        j += mask[i] != 0
    return out[:nnz]


def scatter_masked(const float[::1] packed, const uint8_t[::1] mask):
    cdef Py_ssize_t i, j = 0, n = mask.shape[0], m = packed.shape[0], nnz = 0
    cdef uint32_t keep
    for i in range(n):
        nnz += mask[i] != 0
    if nnz > m:
        raise ValueError("packed buffer shorter than mask population")
    out = np.zeros(n, dtype=np.uint32)
    if nnz == 0:
        return out.view(np.float32)
    # work on the bit patterns so the select is an AND, not a branch
    cdef const uint32_t[::1] src = np.asarray(packed).view(np.uint32)
    cdef uint32_t[::1] o = out
    cdef Py_ssize_t last = m - 1
    for i in range(n):
        keep = mask[i] != 0
        o[i] = src[min(j, last)] & (<uint32_t>0 - keep)
        j += keep
    return out.view(np.float32)


def pack_signs(const int8_t[::1] signs):
    cdef Py_ssize_t i, n = signs.shape[0]
    out = np.zeros((n + 3) // 4, dtype=np.uint8)
    cdef uint8_t[::1] o = out
    cdef uint8_t code
    for i in range(n):
        if signs[i] > 0:
            code = 1
        elif signs[i] < 0:
            code = 2
        else:
            continue
        o[i >> 2] |= code << ((i & 3) * 2)
    return out


def unpack_signs(const uint8_t[::1] buf, Py_ssize_t n):
    if buf.shape[0] * 4 < n:
        raise ValueError("sign buffer too short")
    out = np.zeros(n, dtype=np.int8)
    cdef int8_t[::1] o = out
    cdef Py_ssize_t i
    cdef uint8_t code
    for i in range(n):
        code = (buf[i >> 2] >> ((i & 3) * 2)) & 3
        if code == 1:
            o[i] = 1
        elif code == 2:
            o[i] = -1
        elif code == 3:
            raise ValueError("reserved sign code 0b11")
    return out


def ternary_signs(const float[::1] grad, const double[::1] uniforms, float scale):
    cdef Py_ssize_t i, n = grad.shape[0]
    out = np.zeros(n, dtype=np.int8)
    if scale == 0.0:
        return out
    cdef int8_t[::1] o = out
    cdef double g, s = scale
    for i in range(n):
        g = grad[i]
        if g > 0.0:
            if uniforms[i] < g / s:
                o[i] = 1
        elif g < 0.0:
            if uniforms[i] < -g / s:
                o[i] = -1
    return out
