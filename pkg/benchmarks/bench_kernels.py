"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--length N] [--repeat R]

Prints the best-of-R time per call for every kernel and backend, plus the
speedup of the compiled backend. Both backends are checked for identical
output before timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from maskreduce.kernels import backends


def workloads(length: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal(length).astype(np.float32)
    mask = (rng.random(length) < 0.5).astype(np.uint8)
    packed = values[mask.view(np.bool_)]
    signs = rng.integers(-1, 2, length).astype(np.int8)
    uniforms = rng.random(length)
    scale = np.float32(np.max(np.abs(values)))
    return {
        "fnv1a64": lambda k: k.fnv1a64(np.packbits(mask, bitorder="little")),
        "gather_masked": lambda k: k.gather_masked(values, mask),
        "scatter_masked": lambda k: k.scatter_masked(packed, mask),
        "pack_signs": lambda k: k.pack_signs(signs),
        "unpack_signs": lambda k: k.unpack_signs(k.pack_signs(signs), length),
        "ternary_signs": lambda k: k.ternary_signs(values, uniforms, scale),
    }


def _same(a, b) -> bool:
    if isinstance(a, np.ndarray):
        return a.dtype == b.dtype and a.tobytes() == b.tobytes()
    return a == b


def run(length: int = 1_000_000, repeat: int = 5, log=print) -> dict:
    impls = backends()
    results = {}
    log(f"length {length}, best of {repeat}; backends: {', '.join(impls)}")
    log(f"{'kernel':<16}" + "".join(f"{name:>12}" for name in impls) + ("     speedup" if len(impls) > 1 else ""))
    for name, call in workloads(length).items():
        outputs = [call(k) for k in impls.values()]
        if not all(_same(outputs[0], o) for o in outputs[1:]):
            raise AssertionError(f"backends disagree on {name}")
        times = {b: min(timeit.repeat(lambda k=k: call(k), number=1, repeat=repeat)) for b, k in impls.items()}
        results[name] = times
        row = f"{name:<16}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times.values())
        if "cython" in times and "python" in times:
            row += f"{times['python'] / times['cython']:>11.1f}x"
        log(row)
    return results


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--length", type=int, default=1_000_000)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    run(args.length, args.repeat)


if __name__ == "__main__":
    main()
