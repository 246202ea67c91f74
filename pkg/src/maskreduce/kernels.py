"""Hot-loop kernels with a compiled core and a numpy fallback.

The Cython module is used when it was built; set ``MASKREDUCE_PURE_PYTHON=1``
to force the fallback. Callers pass contiguous arrays: float32 values,
uint8 masks (0/1), int8 signs, float64 uniforms.
"""
import importlib
import os

from . import _pykernels


def _load_compiled():
    if os.environ.get("MASKREDUCE_PURE_PYTHON"):
        return None
    try:
        return importlib.import_module("maskreduce._ckernels")
    except ImportError:
        return None


_compiled = _load_compiled()
_impl = _compiled if _compiled is not None else _pykernels

BACKEND = "cython" if _compiled is not None else "python"

fnv1a64 = _impl.fnv1a64
gather_masked = _impl.gather_masked
scatter_masked = _impl.scatter_masked
pack_signs = _impl.pack_signs
unpack_signs = _impl.unpack_signs
ternary_signs = _impl.ternary_signs


def backends():
    """Map backend name to module for every backend importable in this process."""
    found = {"python": _pykernels}
    try:
        found["cython"] = importlib.import_module("maskreduce._ckernels")
    except ImportError:
        pass
    return found
