"""Server-side protocol steps: pick a user, filter the labeled server corpus through
that user's autoencoder, encode it, and train one base classifier per distribution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ProtocolError
from .models import (DROPOUT_RATE, AutoencoderParams, BaseModelParams, autoencoder_network,
                     base_network, encode, init_base_model)
from .nn import AdamState, adam_step, cross_entropy_loss, per_sample_mse

MIN_KEEP = 32


@dataclass
class LabeledArrays:
    x: np.ndarray  # (n, D) or (n, L) once encoded
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "LabeledArrays":
        return LabeledArrays(self.x[idx], self.y[idx])


@dataclass
class ServerCorpus:
    distributions: list[LabeledArrays]
    n_classes: int

    def __post_init__(self):
        if not self.distributions:
            raise ParameterError("the server corpus needs at least one distribution")
        for m, dist in enumerate(self.distributions):
            if len(dist) == 0:
                raise ParameterError(f"server distribution {m} is empty")
            if dist.y.min() < 0 or dist.y.max() >= self.n_classes:
                raise ParameterError(f"server distribution {m} has labels outside [0, {self.n_classes})")

    @property
    def m(self) -> int:
        return len(self.distributions)


@dataclass
class SelectionReport:
    kept: int
    total: int
    mean_loss: float
    fallback: bool


def select_user(users, rng: np.random.Generator) -> int:
    users = list(users)
    if not users:
        raise ParameterError("no registered users to select from")
    return users[int(rng.integers(len(users)))]


def sample_losses(ae: AutoencoderParams, x: np.ndarray) -> np.ndarray:
    """Per-sample element-mean reconstruction error, eval mode."""
    return per_sample_mse(autoencoder_network(ae).forward(x, training=False), x)


def select_samples(dist: LabeledArrays, ae: AutoencoderParams, tau: float,
                   min_keep: int = MIN_KEEP):
    """Keep samples the user's autoencoder reconstructs with loss below ``tau``.

    If fewer than ``min_keep`` pass, the ``min_keep`` lowest-loss samples are kept
    instead and the report's ``fallback`` flag is set.
    """
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    if len(dist) == 0:
        raise ProtocolError("cannot select from an empty distribution")
    losses = sample_losses(ae, dist.x)
    keep = np.flatnonzero(losses < tau)
    fallback = len(keep) < min(min_keep, len(dist))
    if fallback:
        keep = np.sort(np.argsort(losses, kind="stable")[:min(min_keep, len(dist))])
    report = SelectionReport(len(keep), len(dist), float(losses.mean()), bool(fallback))
    return dist.subset(keep), report


def encode_corpus(subset: LabeledArrays, ae: AutoencoderParams) -> LabeledArrays:
    if len(subset) == 0:
        raise ProtocolError("cannot encode an empty subset")
    return LabeledArrays(encode(ae, subset.x), subset.y.copy())


def train_base_model(data: LabeledArrays, base: BaseModelParams, epochs: int,
                     rng: np.random.Generator, batch_size: int = 128, lr: float = 0.001,
                     dropout_rate: float = DROPOUT_RATE) -> BaseModelParams:
    net = base_network(base, dropout_rate)
    opt = AdamState.for_params(net.params(), lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), batch_size):
            idx = order[start:start + batch_size]
            logits = net.forward(data.x[idx], training=True, rng=rng)
            _, grad = cross_entropy_loss(logits, data.y[idx])
            grads, _ = net.backward(grad)
            adam_step(net.params(), grads, opt)
    return base


def train_base_models(encoded: list[LabeledArrays], n_classes: int, hidden: int, epochs: int,
                      rngs: list[np.random.Generator], batch_size: int = 128, lr: float = 0.001,
                      dropout_rate: float = DROPOUT_RATE, dtype=np.float32) -> list[BaseModelParams]:
    """Train one freshly initialized base model per encoded distribution.

    ``rngs`` pairs a generator with each distribution, so the result is a plain map:
    reordering distributions together with their generators reorders the models.
    """
    if not encoded:
        raise ProtocolError("no encoded distributions to train on")
    if len(rngs) != len(encoded):
        raise ProtocolError("one generator per distribution is required")
    for m, dist in enumerate(encoded):
        if len(dist) == 0:
            raise ProtocolError(f"encoded distribution {m} is empty")
        if dist.y.max() >= n_classes:
            raise ProtocolError(f"distribution {m} has labels beyond {n_classes} classes")
    models = []
    for dist, rng in zip(encoded, rngs):
        base = init_base_model(dist.x.shape[1], hidden, n_classes, rng, dtype)
        models.append(train_base_model(dist, base, epochs, rng, batch_size, lr, dropout_rate))
    return models
