"""A small ReLU MLP with hand-written backprop over one flat parameter bucket."""
from __future__ import annotations

import math

import numpy as np

from .errors import NumericalFailure, ShapeMismatch
from .tensor import as_flat, flatten


class Mlp:
    """Fully connected ReLU network with a softmax cross-entropy head.

    Parameters live in one flat float32 buffer laid out as
    ``fc0.weight (in x out), fc0.bias, fc1.weight, ...``.
    """

    def __init__(self, layer_sizes=(64, 128, 10), params=None):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        shapes = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes, self.layer_sizes[1:])):
            shapes.append((f"fc{i}.weight", (fan_in, fan_out)))
            shapes.append((f"fc{i}.bias", (fan_out,)))
        flat, self.view = flatten((name, np.zeros(shape, dtype=np.float32)) for name, shape in shapes)
        self.params = flat if params is None else params

    @property
    def params(self) -> np.ndarray:
        return self._params

    @params.setter
    def params(self, value):
        value = as_flat(value, copy=True)
        if len(value) != self.view.size:
            raise ShapeMismatch(f"expected {self.view.size} parameters, got {len(value)}")
        self._params = value

    @property
    def num_params(self) -> int:
        return self.view.size

    @classmethod
    def initialize(cls, layer_sizes=(64, 128, 10), seed=0) -> Mlp:
        """He-uniform weights and zero biases from a seeded generator."""
        model = cls(layer_sizes)
        rng = np.random.default_rng(seed)
        params = np.zeros(model.num_params, dtype=np.float32)
        for entry in model.view.entries:
            if entry.name.endswith(".weight"):
                bound = math.sqrt(6.0 / entry.shape[0])
                params[entry.offset:entry.offset + entry.length] = rng.uniform(-bound, bound, entry.length)
        model.params = params
        return model

    def copy(self) -> Mlp:
        return Mlp(self.layer_sizes, self.params)

    def _layers(self, params):
        layers = []
        for i in range(len(self.layer_sizes) - 1):
            w = params[self.view.slice(f"fc{i}.weight")].reshape(self.view[f"fc{i}.weight"].shape)
            b = params[self.view.slice(f"fc{i}.bias")]
            layers.append((w, b))
        return layers

    def logits(self, features, params=None):
        params = self.params if params is None else params
        h = np.asarray(features, dtype=np.float64)
        layers = self._layers(np.asarray(params, dtype=np.float64))
        for i, (w, b) in enumerate(layers):
            h = h @ w + b
            if i < len(layers) - 1:
                h = np.maximum(h, 0.0)
        return h

    def loss_and_grad(self, params, batch):
        """Mean softmax cross-entropy and its gradient, both in float64."""
        # overflow is checked explicitly below and raised as NumericalFailure
        with np.errstate(over="ignore", invalid="ignore"):
            return self._loss_and_grad(params, batch)

    def _loss_and_grad(self, params, batch):
        features, labels = batch
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ShapeMismatch("batch must be a non-empty 2-D feature array")
        if x.shape[1] != self.layer_sizes[0]:
            raise ShapeMismatch(f"feature dim {x.shape[1]} != input size {self.layer_sizes[0]}")
        params = np.asarray(params, dtype=np.float64)
        layers = self._layers(params)

        acts = [x]
        pre = []
        h = x
        for i, (w, b) in enumerate(layers):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
            acts.append(h)

        z = pre[-1]
        z = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        m = x.shape[0]
        loss = float(np.mean(logsum - z[np.arange(m), y]))
        if not math.isfinite(loss):
            raise NumericalFailure("non-finite loss")

        grad = np.zeros_like(params)
        delta = np.exp(z - logsum[:, None])
        delta[np.arange(m), y] -= 1.0
        delta /= m
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            grad[self.view.slice(f"fc{i}.weight")] = (acts[i].T @ delta).reshape(-1)
            grad[self.view.slice(f"fc{i}.bias")] = delta.sum(axis=0)
            if i:
                delta = (delta @ w.T) * (pre[i - 1] > 0)
        if not np.all(np.isfinite(grad)):
            raise NumericalFailure("non-finite gradient")
        return loss, grad

    def accuracy(self, features, labels) -> float:
        if len(labels) == 0:
            return 0.0
        pred = np.argmax(self.logits(features), axis=1)
        return float(np.mean(pred == np.asarray(labels)))


def forward_backward(model: Mlp, batch):
    """``(loss, grad)`` for the model's current parameters; grad is a float32 flat buffer."""
    loss, grad = model.loss_and_grad(model.params, batch)
    with np.errstate(over="ignore"):
        out = grad.astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("gradient overflows float32")
    return loss, out


def sgd_step(params, mean_grad, lr: float, mask=None) -> np.ndarray:
    """Plain SGD ``X - lr * g`` on flat buffers.

    ``mask`` is only checked: the gradient must already be zero wherever it is cleared.
    """
    x = as_flat(params)
    g = as_flat(mean_grad)
    if len(x) != len(g):
        raise ShapeMismatch(f"parameters ({len(x)}) and gradient ({len(g)}) differ in length")
    if mask is not None:
        if len(mask) != len(x):
            raise ShapeMismatch(f"mask ({len(mask)}) and parameters ({len(x)}) differ in length")
        if np.any(g[~mask.bits]):
            raise ValueError("gradient is non-zero at pruned coordinates")
    return (x - np.float32(lr) * g).astype(np.float32)

