"""Pruning masks, gradient sparsity enforcement, and the mask tracker."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidRatio, NumericalFailure, ShapeMismatch
from .tensor import SparsityMask, as_flat, check_same_length


class PruneMethod(str, enum.Enum):
    MAGNITUDE = "magnitude"
    GRASP = "grasp"


@dataclass(frozen=True)
class PruneConfig:
    ratio: float = 0.0
    method: PruneMethod = PruneMethod.MAGNITUDE
    grasp_epsilon: float = 1e-3
    # which end of the GraSP score distribution survives pruning
    grasp_keep_negative: bool = True
    # "global" ranks all parameters together; "layer" prunes each weight tensor by the same ratio
    scope: str = "global"

    def __post_init__(self):
        _check_ratio(self.ratio)
        if not self.grasp_epsilon > 0:
            raise ValueError("grasp_epsilon must be positive")
        object.__setattr__(self, "method", PruneMethod(self.method))
        if self.scope not in ("global", "layer"):
            raise ValueError(f"unknown pruning scope {self.scope!r}")


def _check_ratio(ratio):
    if not (0.0 <= ratio < 1.0):
        raise InvalidRatio(f"pruning ratio must lie in [0, 1), got {ratio}")


def _prune_lowest(keys: np.ndarray, ratio: float) -> SparsityMask:
    """Drop the floor(ratio*len) entries with the smallest key, lower index first on ties."""
    _check_ratio(ratio)
    n = len(keys)
    k = math.floor(ratio * n)
    bits = np.ones(n, dtype=np.bool_)
    if k:
        order = np.argsort(keys, kind="stable")
        bits[order[:k]] = False
    return SparsityMask(bits)


def magnitude_prune(weights, ratio: float) -> SparsityMask:
    """Global unstructured magnitude pruning.

    Exactly ``floor(ratio * len)`` of the smallest-magnitude weights are
    dropped. Use :func:`apply_mask` to zero the pruned weights.
    """
    w = as_flat(weights)
    return _prune_lowest(np.abs(w), ratio)


def layerwise_prune(keys, ratio: float, view, lowest_first: bool = True) -> SparsityMask:
    """Prune each ``*.weight`` entry of ``view`` separately; biases are always kept.

    Within an entry the ``floor(ratio * length)`` lowest keys go (highest when
    ``lowest_first`` is false), ties by lower index.
    """
    _check_ratio(ratio)
    keys = np.asarray(keys, dtype=np.float64)
    bits = np.ones(len(keys), dtype=np.bool_)
    for e in view.entries:
        if not e.name.endswith("weight"):
            continue
        part = keys[e.offset:e.offset + e.length]
        sub = _prune_lowest(part if lowest_first else -part, ratio)
        bits[e.offset:e.offset + e.length] = sub.bits
    return SparsityMask(bits)


def apply_mask(weights, mask: SparsityMask) -> np.ndarray:
    w = as_flat(weights)
    check_same_length(w, mask, "weights and mask")
    return np.where(mask.bits, w, np.float32(0.0)).astype(np.float32)


def enforce_gradient_sparsity(grad, mask: SparsityMask) -> np.ndarray:
    """Zero the gradient wherever the mask is cleared; kept values pass through untouched."""
    g = np.asarray(grad, dtype=np.float32)
    if g.ndim != 1 or len(g) != len(mask):
        raise ShapeMismatch(f"gradient of length {g.size} vs mask of length {len(mask)}")
    # AND with an all-ones/all-zeros word per element: branch-free, and cleared slots become +0.0
    keep = np.negative(mask.as_uint8(), dtype=np.uint32)
    return (np.ascontiguousarray(g).view(np.uint32) & keep).view(np.float32)


def hessian_gradient_product(loss_grad, theta, epsilon: float):
    """Return ``(g, Hg)`` at ``theta`` using a central difference along ``g``.

    ``loss_grad(theta) -> (loss, grad)`` must accept float64 parameter vectors.
    The step is ``epsilon / max(1, ||g||)`` so the probe length stays bounded.
    """
    theta = np.asarray(theta, dtype=np.float64)
    loss, g = loss_grad(theta)
    g = np.asarray(g, dtype=np.float64)
    if not (np.isfinite(loss) and np.all(np.isfinite(g))):
        raise NumericalFailure("non-finite loss or gradient at theta")
    step = epsilon / max(1.0, float(np.linalg.norm(g)))
    _, g_plus = loss_grad(theta + step * g)
    _, g_minus = loss_grad(theta - step * g)
    hg = (np.asarray(g_plus, dtype=np.float64) - np.asarray(g_minus, dtype=np.float64)) / (2.0 * step)
    if not np.all(np.isfinite(hg)):
        raise NumericalFailure("non-finite Hessian-gradient product")
    return g, hg


def grasp_scores(model, batch, epsilon: float = 1e-3) -> np.ndarray:
    """GraSP saliency ``-theta * (H g)`` for every parameter in the flat buffer.

    ``model`` exposes ``params`` (flat buffer) and ``loss_and_grad(params, batch)``.
    """
    if batch is None or len(batch[0]) == 0:
        raise ValueError("GraSP scoring needs a non-empty batch")
    theta = np.asarray(model.params, dtype=np.float64)
    _, hg = hessian_gradient_product(lambda p: model.loss_and_grad(p, batch), theta, epsilon)
    scores = -theta * hg
    if not np.all(np.isfinite(scores)):
        raise NumericalFailure("non-finite GraSP scores")
    return scores.astype(np.float32)


def grasp_prune(scores, ratio: float, keep_negative: bool = True) -> SparsityMask:
    """Prune the ``floor(ratio*len)`` scores at the discarded end.

    With ``keep_negative`` the algebraically largest scores go first;
    otherwise the smallest go first. Ties prune the lower index first.
    """
    s = np.asarray(scores, dtype=np.float64)
    return _prune_lowest(-s if keep_negative else s, ratio)


class Status(enum.Enum):
    UNSTABLE = "unstable"
    STABLE = "stable"


class MaskTracker:
    """Declares a mask stable after ``threshold`` consecutive repeats of its digest.

    The first observation of a digest counts as zero repeats, so ``threshold + 1``
    identical observations in a row are needed.
    """

    def __init__(self, threshold: int = 3):
        if threshold < 1:
            raise ValueError("stability threshold must be a positive integer")
        self.threshold = threshold
        self.last_digest: int | None = None
        self.stable_count = 0
        self.observations = 0

    @property
    def status(self) -> Status:
        return Status.STABLE if self.stable_count >= self.threshold else Status.UNSTABLE

    def observe(self, mask_or_digest) -> Status:
        digest = mask_or_digest.digest if isinstance(mask_or_digest, SparsityMask) else int(mask_or_digest)
        if self.last_digest is not None and digest == self.last_digest:
            self.stable_count += 1
        else:
            self.stable_count = 0
        self.last_digest = digest
        self.observations += 1
        return self.status


def tracker_observe(tracker: MaskTracker, mask: SparsityMask) -> Status:
    return tracker.observe(mask)
