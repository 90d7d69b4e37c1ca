"""The three networks: per-user autoencoder, base classifier, and the hypernetwork
that emits autoencoder parameters from a learned user embedding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ProtocolError, ShapeError
from .nn import (DEFAULT_DTYPE, Linear, Sequential, glorot_linear, linear_backward,
                 linear_forward, relu)

DROPOUT_RATE = 0.2


def autoencoder_widths(input_dim: int, hidden: int | None = None,
                       latent: int | None = None) -> tuple[int, int, int]:
    """Default widths: hidden = ceil(D/2), latent = ceil(D/4)."""
    hidden = hidden or math.ceil(input_dim / 2)
    latent = latent or math.ceil(input_dim / 4)
    return input_dim, hidden, latent


class _Bundle:
    """Shared helpers for fixed-layout parameter bundles."""

    _layer_names: tuple[str, ...] = ()

    @property
    def layers(self) -> list[Linear]:
        return [getattr(self, name) for name in self._layer_names]

    def tensors(self) -> list[np.ndarray]:
        return [t for layer in self.layers for t in layer.params()]

    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors()]

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def copy(self):
        return type(self)(*[layer.copy() for layer in self.layers])

    @classmethod
    def from_tensors(cls, tensors: list[np.ndarray]):
        if len(tensors) != 2 * len(cls._layer_names):
            raise ShapeError(f"{cls.__name__} needs {2 * len(cls._layer_names)} tensors")
        layers = [Linear(tensors[2 * i], tensors[2 * i + 1]) for i in range(len(cls._layer_names))]
        return cls(*layers)

    def with_vector(self, vector: np.ndarray):
        """A bundle of the same layout filled from a flat vector."""
        if vector.size != self.size:
            raise ShapeError(f"vector of {vector.size} scalars for a bundle of {self.size}")
        out, offset = [], 0
        for t in self.tensors():
            out.append(vector[offset:offset + t.size].reshape(t.shape).astype(t.dtype))
            offset += t.size
        return type(self).from_tensors(out)

    def same_layout(self, other) -> bool:
        return type(self) is type(other) and self.shapes() == other.shapes()


@dataclass
class AutoencoderParams(_Bundle):
    enc1: Linear
    enc2: Linear
    dec1: Linear
    dec2: Linear

    _layer_names = ("enc1", "enc2", "dec1", "dec2")

    def __post_init__(self):
        d, h, latent = self.enc1.in_features, self.enc1.out_features, self.enc2.out_features
        chain = [(self.enc1, d, h), (self.enc2, h, latent), (self.dec1, latent, h), (self.dec2, h, d)]
        for layer, n_in, n_out in chain:
            if layer.weight.shape != (n_out, n_in) or layer.bias.shape != (n_out,):
                raise ShapeError("autoencoder layer shapes do not close the D-H-L-H-D chain")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.enc1.in_features, self.enc1.out_features, self.enc2.out_features

    @property
    def encoder_layers(self) -> list[Linear]:
        return [self.enc1, self.enc2]


@dataclass
class BaseModelParams(_Bundle):
    fc1: Linear
    fc2: Linear

    _layer_names = ("fc1", "fc2")

    def __post_init__(self):
        if self.fc1.out_features != self.fc2.in_features:
            raise ShapeError("base model hidden widths do not match")

    @property
    def latent_dim(self) -> int:
        return self.fc1.in_features

    @property
    def n_classes(self) -> int:
        return self.fc2.out_features


@dataclass
class GlobalModelParams(_Bundle):
    """Encoder + classifier trained end to end by the FedAVG baseline."""

    enc1: Linear
    enc2: Linear
    fc1: Linear
    fc2: Linear

    _layer_names = ("enc1", "enc2", "fc1", "fc2")


def init_autoencoder(dims: tuple[int, int, int], rng: np.random.Generator,
                     dtype=DEFAULT_DTYPE) -> AutoencoderParams:
    d, h, latent = dims
    return AutoencoderParams(glorot_linear(d, h, rng, dtype), glorot_linear(h, latent, rng, dtype),
                             glorot_linear(latent, h, rng, dtype), glorot_linear(h, d, rng, dtype))


def init_base_model(latent: int, hidden: int, n_classes: int, rng: np.random.Generator,
                    dtype=DEFAULT_DTYPE) -> BaseModelParams:
    return BaseModelParams(glorot_linear(latent, hidden, rng, dtype),
                           glorot_linear(hidden, n_classes, rng, dtype))


def init_global_model(dims: tuple[int, int, int], base_hidden: int, n_classes: int,
                      rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> GlobalModelParams:
    d, h, latent = dims
    return GlobalModelParams(glorot_linear(d, h, rng, dtype), glorot_linear(h, latent, rng, dtype),
                             glorot_linear(latent, base_hidden, rng, dtype),
                             glorot_linear(base_hidden, n_classes, rng, dtype))


def autoencoder_network(p: AutoencoderParams, dropout_rate: float = DROPOUT_RATE) -> Sequential:
    return Sequential(p.layers, dropout_rate=dropout_rate, activate_last=False)


def autoencoder_forward(p: AutoencoderParams, x: np.ndarray, training: bool = False,
                        rng: np.random.Generator | None = None,
                        dropout_rate: float = DROPOUT_RATE):
    """Returns ``(reconstruction, latent)``.

    ReLU and dropout follow every layer except the last decoder layer. ``latent`` is
    the post-ReLU encoder output (before dropout).
    """
    if x.ndim != 2 or x.shape[1] != p.dims[0]:
        raise ShapeError(f"autoencoder expects (batch, {p.dims[0]}), got {x.shape}")
    net = autoencoder_network(p, dropout_rate)
    recon = net.forward(x, training=training, rng=rng)
    return recon, net.activations()[1]


def encode(p: AutoencoderParams, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.dims[0]:
        raise ShapeError(f"encoder expects (batch, {p.dims[0]}), got {x.shape}")
    return relu(linear_forward(p.enc2, relu(linear_forward(p.enc1, x))))


def base_network(p, dropout_rate: float = DROPOUT_RATE) -> Sequential:
    return Sequential(p.layers, dropout_rate=dropout_rate, activate_last=False)


def base_forward(p: BaseModelParams, latent: np.ndarray, training: bool = False,
                 rng: np.random.Generator | None = None,
                 dropout_rate: float = DROPOUT_RATE) -> np.ndarray:
    if latent.ndim != 2 or latent.shape[1] != p.latent_dim:
        raise ShapeError(f"base model expects (batch, {p.latent_dim}), got {latent.shape}")
    return base_network(p, dropout_rate).forward(latent, training=training, rng=rng)


# --- hypernetwork -----------------------------------------------------------------

@dataclass
class HypernetState:
    """Hypernetwork parameters plus the per-user embedding table.

    The trunk maps an embedding through ReLU hidden layers; one linear head per
    autoencoder tensor emits that tensor's scalars.
    """

    trunk: list[Linear]
    heads: list[Linear]
    embeddings: dict[int, np.ndarray]
    target_dims: tuple[int, int, int]
    mu: float = 0.01
    zeta: float = 0.01

    def __post_init__(self):
        template = _template_shapes(self.target_dims)
        if [h.out_features for h in self.heads] != [int(np.prod(s)) for s in template]:
            raise ShapeError("head output sizes do not cover the autoencoder tensors")
        self._shapes = template

    @property
    def embedding_dim(self) -> int:
        return self.trunk[0].in_features

    def theta(self) -> list[np.ndarray]:
        return [t for layer in self.trunk + self.heads for t in layer.params()]

    def register(self, user: int, embedding: np.ndarray) -> None:
        if embedding.shape != (self.embedding_dim,):
            raise ShapeError(f"embedding must have shape ({self.embedding_dim},)")
        self.embeddings[user] = embedding


def _template_shapes(dims: tuple[int, int, int]) -> list[tuple[int, ...]]:
    d, h, latent = dims
    shapes = []
    for n_in, n_out in [(d, h), (h, latent), (latent, h), (h, d)]:
        shapes += [(n_out, n_in), (n_out,)]
    return shapes


def init_hypernet(users, target_dims: tuple[int, int, int], rng: np.random.Generator,
                  embedding_dim: int = 16, hidden: int = 100, n_hidden: int = 2,
                  mu: float = 0.01, zeta: float = 0.01, embedding_std: float = 0.1,
                  dtype=DEFAULT_DTYPE) -> HypernetState:
    if n_hidden < 1:
        raise ParameterError("hypernetwork trunk needs at least one hidden layer")
    widths = [embedding_dim] + [hidden] * n_hidden
    trunk = [glorot_linear(a, b, rng, dtype) for a, b in zip(widths, widths[1:])]
    heads = [glorot_linear(hidden, int(np.prod(s)), rng, dtype) for s in _template_shapes(target_dims)]
    embeddings = {int(u): (rng.normal(0.0, embedding_std, embedding_dim)).astype(dtype) for u in users}
    return HypernetState(trunk, heads, embeddings, tuple(target_dims), mu, zeta)


def _embedding(h: HypernetState, user: int) -> np.ndarray:
    try:
        return h.embeddings[user]
    except KeyError:
        raise KeyError(f"user {user} is not registered with the hypernetwork") from None


def _trunk(h: HypernetState) -> Sequential:
    return Sequential(h.trunk, dropout_rate=0.0, activate_last=True)


def hypernet_generate(h: HypernetState, alpha: np.ndarray) -> AutoencoderParams:
    features = _trunk(h).forward(alpha[None, :])
    tensors = [linear_forward(head, features)[0].reshape(shape)
               for head, shape in zip(h.heads, h._shapes)]
    return AutoencoderParams.from_tensors(tensors)


def hypernet_forward(h: HypernetState, user: int) -> AutoencoderParams:
    return hypernet_generate(h, _embedding(h, user))


def update_direction(sent: AutoencoderParams, received: AutoencoderParams) -> list[np.ndarray]:
    """Per-tensor ``sent - received``.

    Descending on ``<sent - received, h(alpha, theta)>`` pulls the generated bundle
    toward what the client returned.
    """
    if not sent.same_layout(received):
        raise ProtocolError("sent and received autoencoders have different layouts")
    return [a - b for a, b in zip(sent.tensors(), received.tensors())]


def surrogate(h: HypernetState, alpha: np.ndarray, direction: list[np.ndarray]) -> float:
    """Inner product of a fixed per-tensor direction with the generated parameters."""
    generated = hypernet_generate(h, alpha).tensors()
    return float(sum(np.sum(d.astype(np.float64) * g) for d, g in zip(direction, generated)))


def surrogate_gradients(h: HypernetState, alpha: np.ndarray, direction: list[np.ndarray]):
    """Gradients of :func:`surrogate` w.r.t. ``theta`` (ordered like ``h.theta()``) and ``alpha``."""
    trunk = _trunk(h)
    features = trunk.forward(alpha[None, :])
    head_grads = []
    grad_features = np.zeros_like(features)
    for head, d in zip(h.heads, direction):
        g_out = d.reshape(1, -1).astype(features.dtype)
        g_feat, g_w, g_b = linear_backward(head, features, g_out)
        grad_features += g_feat
        head_grads += [g_w, g_b]
    trunk_grads, grad_alpha = trunk.backward(grad_features)
    return trunk_grads + head_grads, grad_alpha[0]


def hypernet_update(h: HypernetState, user: int, sent: AutoencoderParams,
                    received: AutoencoderParams) -> HypernetState:
    """One outer step on ``theta`` and the user's embedding, in place.

    Both gradients are evaluated at the pre-update point and then applied.
    """
    alpha = _embedding(h, user)
    direction = update_direction(sent, received)
    theta_grads, alpha_grad = surrogate_gradients(h, alpha, direction)
    for p, g in zip(h.theta(), theta_grads):
        p -= (h.mu * g).astype(p.dtype)
    h.embeddings[user] = (alpha - h.zeta * alpha_grad).astype(alpha.dtype)
    return h


# --- serialization ----------------------------------------------------------------

def serialize_bundle(bundle: _Bundle) -> bytes:
    """JSON shape header line, then the little-endian float32 scalar stream."""
    header = json.dumps({"type": type(bundle).__name__,
                         "shapes": [list(s) for s in bundle.shapes()]}).encode()
    body = bundle.to_vector().astype("<f4").tobytes()
    return header + b"\n" + body


_BUNDLE_TYPES = {cls.__name__: cls for cls in (AutoencoderParams, BaseModelParams, GlobalModelParams)}


def deserialize_bundle(payload: bytes):
    header, body = payload.split(b"\n", 1)
    meta = json.loads(header)
    flat = np.frombuffer(body, dtype="<f4").astype(DEFAULT_DTYPE)
    tensors, offset = [], 0
    for shape in meta["shapes"]:
        n = int(np.prod(shape))
        tensors.append(flat[offset:offset + n].reshape(shape).copy())
        offset += n
    if offset != flat.size:
        raise ShapeError("payload length does not match its shape header")
    return _BUNDLE_TYPES[meta["type"]].from_tensors(tensors)
