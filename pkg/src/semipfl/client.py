"""Edge-user behavior: unlabeled autoencoder fine-tuning and simplex-weighted
aggregation of the base models the server sends back."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import PreparedUser
from .errors import ParameterError, ProtocolError, StateError
from .metrics import cohen_kappa, confusion_matrix, macro_f1
from .models import (DROPOUT_RATE, AutoencoderParams, BaseModelParams, autoencoder_network,
                     base_forward, encode)
from .nn import AdamState, adam_step, cross_entropy_loss, mse_loss, per_sample_mse, softmax

# Speed factors of the three hardware tiers; equal wall-clock budget means
# proportionally fewer local epochs on slower devices.
SYSTEM_SPEED = {1: 1.0, 2: 0.5, 3: 0.25}


def effective_epochs(epochs: int, speed: float) -> int:
    if epochs < 1:
        raise ParameterError(f"epochs must be at least 1, got {epochs}")
    if not 0.0 < speed <= 1.0:
        raise ParameterError(f"speed factor must lie in (0, 1], got {speed}")
    return max(1, math.ceil(round(epochs * speed, 9)))


@dataclass
class UserState:
    id: int
    x_labeled: np.ndarray  # D_j inputs, (n, D)
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray  # U_j, (n, D)
    x_eval: np.ndarray  # E_j
    y_eval: np.ndarray
    speed: float = 1.0
    system: int = 1
    model: "PersonalizedModel | None" = None
    participated: bool = False

    @classmethod
    def from_prepared(cls, user_id: int, prepared: PreparedUser, system: int = 1,
                      speed: float | None = None) -> "UserState":
        s = prepared.split
        return cls(user_id, s.labeled.flat(), s.labeled.labels, s.unlabeled.flat(),
                   s.evaluation.flat(), s.evaluation.labels, system=system,
                   speed=SYSTEM_SPEED[system] if speed is None else speed)

    def inputs(self) -> np.ndarray:
        """Every training input the user holds, labeled or not."""
        return np.concatenate([self.x_labeled, self.x_unlabeled])


def reconstruction_loss(p: AutoencoderParams, x: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    recon = autoencoder_network(p).forward(x, training=False)
    return float(per_sample_mse(recon, x).mean())


def fine_tune_autoencoder(user: UserState, p: AutoencoderParams, epochs: int,
                          rng: np.random.Generator, batch_size: int = 128, lr: float = 0.001,
                          dropout_rate: float = DROPOUT_RATE) -> AutoencoderParams:
    """Local reconstruction training on the user's inputs; labels are never touched.

    Runs ``ceil(epochs * speed)`` shuffled epochs of Adam on element-mean MSE and
    returns an updated copy.
    """
    x = user.inputs()
    if len(x) == 0:
        raise ProtocolError(f"user {user.id} holds no training inputs")
    n_epochs = effective_epochs(epochs, user.speed)
    local = p.copy()
    net = autoencoder_network(local, dropout_rate)
    opt = AdamState.for_params(net.params(), lr=lr)
    for _ in range(n_epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            batch = x[order[start:start + batch_size]]
            recon = net.forward(batch, training=True, rng=rng)
            _, grad = mse_loss(recon, batch)
            grads, _ = net.backward(grad)
            adam_step(net.params(), grads, opt)
    return local


@dataclass
class MixtureWeights:
    rho: np.ndarray

    @classmethod
    def uniform(cls, m: int) -> "MixtureWeights":
        return cls(np.zeros(m, dtype=np.float64))

    @property
    def chi(self) -> np.ndarray:
        return softmax(self.rho[None, :])[0]


def mix_logits(stacked: np.ndarray, chi: np.ndarray) -> np.ndarray:
    """``sum_m chi_m * logits_m`` for stacked (M, n, C) base logits."""
    return np.tensordot(chi, stacked, axes=1)


@dataclass
class PersonalizedModel:
    """Encoder followed by a chi-weighted mixture of frozen base classifiers."""

    encoder: AutoencoderParams
    bases: list[BaseModelParams]
    chi: np.ndarray
    round: int = -1

    def base_logits(self, x: np.ndarray) -> np.ndarray:
        latent = encode(self.encoder, x)
        return np.stack([base_forward(b, latent) for b in self.bases]).astype(np.float64)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return mix_logits(self.base_logits(x), self.chi)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    @property
    def size(self) -> int:
        """Scalars evaluated at inference: encoder half plus every base model."""
        encoder = sum(layer.size for layer in self.encoder.encoder_layers)
        return encoder + sum(b.size for b in self.bases)


def _check_bases(encoder: AutoencoderParams, bases: list[BaseModelParams]) -> None:
    if not bases:
        raise ProtocolError("at least one base model is required")
    latent = encoder.dims[2]
    classes = {b.n_classes for b in bases}
    if any(b.latent_dim != latent for b in bases) or len(classes) != 1:
        raise ProtocolError("base models disagree on latent width or class count")


def aggregate_base_models(user: UserState, encoder: AutoencoderParams,
                          bases: list[BaseModelParams], epochs: int,
                          rng: np.random.Generator, lr: float = 0.001,
                          batch_size: int = 128):
    """Fit simplex mixture weights over frozen base models on the user's labeled data.

    Weights are ``softmax(rho)`` with ``rho`` initialized at zero (uniform 1/M); only
    ``rho`` is trained. With no labeled data the uniform mixture is kept.
    Returns ``(weights, personalized_model, history)`` where ``history`` lists the
    simplex weights after every step.
    """
    _check_bases(encoder, bases)
    weights = MixtureWeights.uniform(len(bases))
    history = [weights.chi]
    if len(user.x_labeled) > 0 and len(bases) > 1:
        latent = encode(encoder, user.x_labeled)
        stacked = np.stack([base_forward(b, latent) for b in bases]).astype(np.float64)
        labels = user.y_labeled
        opt = AdamState.for_params([weights.rho], lr=lr)
        for _ in range(effective_epochs(epochs, user.speed)):
            order = rng.permutation(len(labels))
            for start in range(0, len(labels), batch_size):
                idx = order[start:start + batch_size]
                chi = weights.chi
                _, grad = cross_entropy_loss(mix_logits(stacked[:, idx], chi), labels[idx])
                grad_chi = np.einsum("bc,mbc->m", grad, stacked[:, idx])
                grad_rho = chi * (grad_chi - chi @ grad_chi)
                adam_step([weights.rho], [grad_rho], opt)
                history.append(weights.chi)
    model = PersonalizedModel(encoder, bases, weights.chi)
    return weights, model, history


def evaluate(user: UserState, model: PersonalizedModel | None, n_classes: int):
    """Macro-F1 and Cohen's kappa of ``model`` on the user's evaluation set."""
    if model is None:
        raise StateError(f"user {user.id} has no personalized model")
    if len(user.y_eval) == 0:
        raise ParameterError(f"user {user.id} has an empty evaluation set")
    cm = confusion_matrix(user.y_eval, model.predict(user.x_eval), n_classes)
    return macro_f1(cm), cohen_kappa(cm)
