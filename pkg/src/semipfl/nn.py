"""Dense network kernel: linear layers, ReLU, inverted dropout, losses and Adam.

Everything works on plain numpy arrays. Batches are row-major ``(batch, features)``;
a layer's weight is stored ``(out, in)`` so ``y = x @ W.T + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError, StateError

DEFAULT_DTYPE = np.float32


@dataclass
class Linear:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    def copy(self) -> "Linear":
        return Linear(self.weight.copy(), self.bias.copy())

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]


def glorot_linear(in_features: int, out_features: int, rng: np.random.Generator,
                  dtype=DEFAULT_DTYPE) -> Linear:
    """Uniform Glorot weights, zero bias."""
    bound = np.sqrt(6.0 / (in_features + out_features))
    weight = rng.uniform(-bound, bound, size=(out_features, in_features)).astype(dtype)
    return Linear(weight, np.zeros(out_features, dtype=dtype))


def zeros_linear(in_features: int, out_features: int, dtype=DEFAULT_DTYPE) -> Linear:
    return Linear(np.zeros((out_features, in_features), dtype=dtype),
                  np.zeros(out_features, dtype=dtype))


def linear_forward(layer: Linear, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"linear layer expects (batch, {layer.in_features}), got {x.shape}")
    return x @ layer.weight.T + layer.bias


def linear_backward(layer: Linear, x: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_weight, grad_bias)`` for ``y = x @ W.T + b``."""
    if grad_out.shape != (x.shape[0], layer.out_features):
        raise ShapeError(f"upstream gradient shape {grad_out.shape} does not match layer output")
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ layer.weight
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout.

    Returns ``(output, mask)`` where ``mask`` already carries the ``1/(1-rate)``
    survivor scale, so the backward pass is a plain elementwise product.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ParameterError("training-mode dropout needs a random generator")
    draw_dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    mask = (rng.random(x.shape, dtype=draw_dtype) >= rate).astype(x.dtype)
    mask *= x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def mse_loss(prediction: np.ndarray, target: np.ndarray):
    """Element-mean squared error and its gradient with respect to ``prediction``."""
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} vs target {target.shape}")
    n = prediction.size
    if n == 0:
        return 0.0, np.zeros_like(prediction)
    diff = prediction.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / n) * diff
    return loss, grad.astype(prediction.dtype)


def per_sample_mse(prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} vs target {target.shape}")
    diff = prediction.astype(np.float64) - target.astype(np.float64)
    return np.mean(diff * diff, axis=1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    """Batch-mean softmax cross-entropy; gradient is ``(softmax - onehot) / batch``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ParameterError(f"labels must lie in [0, {n_classes})")
    batch = logits.shape[0]
    if batch == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    rows = np.arange(batch)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= batch
    return loss, grad.astype(logits.dtype)


class Sequential:
    """A chain of linear layers with ReLU (and dropout) between them.

    ``activate_last`` also applies ReLU+dropout after the final layer. The layer
    objects are used by reference, so updating them in place (e.g. with
    :func:`adam_step`) updates the network.
    """

    def __init__(self, layers: list[Linear], dropout_rate: float = 0.0,
                 activate_last: bool = False):
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ShapeError("consecutive layer widths do not match")
        self.layers = layers
        self.dropout_rate = dropout_rate
        self.activate_last = activate_last
        self._cache = None

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def _activated(self, i: int) -> bool:
        return i < len(self.layers) - 1 or self.activate_last

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        inputs, pre, masks = [], [], []
        h = x
        for i, layer in enumerate(self.layers):
            inputs.append(h)
            z = linear_forward(layer, h)
            if self._activated(i):
                pre.append(z)
                h, mask = dropout(relu(z), self.dropout_rate, training, rng)
                masks.append(mask)
            else:
                pre.append(None)
                masks.append(None)
                h = z
        self._cache = (inputs, pre, masks)
        return h

    def activations(self) -> list[np.ndarray]:
        """Post-ReLU, pre-dropout activations of each activated layer from the last forward."""
        if self._cache is None:
            raise StateError("no forward pass cached")
        _, pre, _ = self._cache
        return [relu(z) for z in pre if z is not None]

    def backward(self, grad_out: np.ndarray):
        """Returns ``(param_grads, grad_input)``; ``param_grads`` is ordered like :meth:`params`."""
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        inputs, pre, masks = self._cache
        grads: list[np.ndarray] = []
        g = grad_out
        for i in reversed(range(len(self.layers))):
            if pre[i] is not None:
                g = g * masks[i] * (pre[i] > 0)
            g, gw, gb = linear_backward(self.layers[i], inputs[i], g)
            grads.append(gb)
            grads.append(gw)
        grads.reverse()
        return grads, g


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 0.001, **kwargs) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kwargs)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer moments differ in count")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        # lr * (m/c1) / (sqrt(v/c2) + eps), with the corrections folded into scalars
        denom = np.sqrt(v)
        denom += state.eps * math.sqrt(c2)
        p -= (state.lr * math.sqrt(c2) / c1) * m / denom
    return params
