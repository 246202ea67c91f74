"""Pruning-induced gradient sparsity with lossless mask-packed ring all-reduce."""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
