import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semipfl.client import (MixtureWeights, PersonalizedModel, UserState, aggregate_base_models,
                            effective_epochs, evaluate, fine_tune_autoencoder, mix_logits,
                            reconstruction_loss)
from semipfl.errors import ParameterError, ProtocolError, StateError
from semipfl.metrics import cohen_kappa, confusion_matrix, macro_f1
from semipfl.models import BaseModelParams, encode, init_autoencoder, init_base_model
from semipfl.nn import Linear


def _user(n_lab=8, n_unlab=12, d=10, seed=0, speed=1.0, classes=2):
    rng = np.random.default_rng(seed)
    f = lambda n: rng.normal(size=(n, d)).astype(np.float32)
    return UserState(0, f(n_lab), rng.integers(0, classes, n_lab), f(n_unlab), f(20),
                     rng.integers(0, classes, 20), speed=speed)


def test_effective_epochs():
    assert effective_epochs(10, 0.25) == 3
    assert effective_epochs(10, 0.5) == 5
    assert effective_epochs(10, 1.0) == 10
    with pytest.raises(ParameterError):
        effective_epochs(0, 1.0)
    with pytest.raises(ParameterError):
        effective_epochs(10, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50))
def test_effective_epochs_monotone_in_severity(t):
    assert effective_epochs(t, 1.0) >= effective_epochs(t, 0.5) >= effective_epochs(t, 0.25)


@pytest.mark.parametrize("seed", range(10))
def test_fine_tune_reduces_loss(seed):
    user = _user(n_lab=5, n_unlab=15, seed=seed)
    p = init_autoencoder((10, 5, 3), np.random.default_rng(seed))
    before = reconstruction_loss(p, user.inputs())
    tuned = fine_tune_autoencoder(user, p, 10, np.random.default_rng(seed), lr=0.01)
    assert reconstruction_loss(tuned, user.inputs()) <= before


def test_fine_tune_leaves_input_untouched():
    user = _user()
    p = init_autoencoder((10, 5, 3), np.random.default_rng(1))
    snapshot = p.to_vector().copy()
    tuned = fine_tune_autoencoder(user, p, 3, np.random.default_rng(1))
    np.testing.assert_array_equal(p.to_vector(), snapshot)
    assert not np.array_equal(tuned.to_vector(), snapshot)


def test_fine_tune_with_only_labeled_inputs():
    user = _user(n_lab=6, n_unlab=0)
    p = init_autoencoder((10, 5, 3), np.random.default_rng(2))
    tuned = fine_tune_autoencoder(user, p, 2, np.random.default_rng(2))
    assert not np.array_equal(tuned.to_vector(), p.to_vector())


def test_fine_tune_empty_union():
    user = _user(n_lab=0, n_unlab=0)
    with pytest.raises(ProtocolError):
        fine_tune_autoencoder(user, init_autoencoder((10, 5, 3), np.random.default_rng(0)), 1,
                              np.random.default_rng(0))


def test_fine_tune_never_reads_labels():
    user = _user()
    p = init_autoencoder((10, 5, 3), np.random.default_rng(3))
    a = fine_tune_autoencoder(user, p, 2, np.random.default_rng(3))
    user.y_labeled = (user.y_labeled + 1) % 2
    b = fine_tune_autoencoder(user, p, 2, np.random.default_rng(3))
    np.testing.assert_array_equal(a.to_vector(), b.to_vector())


def test_fine_tune_epoch_budget_follows_speed():
    # a quarter-speed user runs ceil(10 * 0.25) = 3 epochs, drawing 3 permutations
    user = _user(n_lab=4, n_unlab=4, speed=0.25)
    p = init_autoencoder((10, 5, 3), np.random.default_rng(0))
    slow = fine_tune_autoencoder(user, p, 10, np.random.default_rng(5))
    user.speed = 1.0
    three = fine_tune_autoencoder(user, p, 3, np.random.default_rng(5))
    np.testing.assert_array_equal(slow.to_vector(), three.to_vector())


# --- mixture ------------------------------------------------------------------------

def test_mixture_uniform_and_one_hot():
    assert MixtureWeights.uniform(4).chi.tolist() == [0.25] * 4
    stacked = np.random.default_rng(0).normal(size=(3, 5, 4))
    for m in range(3):
        np.testing.assert_array_equal(mix_logits(stacked, np.eye(3)[m]), stacked[m])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_mixture_on_simplex(rho):
    chi = MixtureWeights(np.array(rho)).chi
    assert abs(chi.sum() - 1) <= 1e-9 and (chi >= 0).all()


def _classifier_from_logits(latent_dim, table):
    """Base model with an identity hidden layer and ``table`` as its readout."""
    w1 = np.eye(latent_dim, dtype=np.float32)
    fc1 = Linear(w1, np.zeros(latent_dim, np.float32))
    fc2 = Linear(np.asarray(table, np.float32), np.zeros(len(table), np.float32))
    return BaseModelParams(fc1, fc2)


def _separable_setup():
    """Encoder that copies positive inputs, a perfect base and a label-blind base."""
    d = latent = 2
    rng = np.random.default_rng(0)
    ae = init_autoencoder((d, 2, latent), rng)
    eye = np.eye(2, dtype=np.float32)
    ae.enc1.weight[:] = eye
    ae.enc1.bias[:] = 0
    ae.enc2.weight[:] = eye
    ae.enc2.bias[:] = 0
    y = np.array([0, 1] * 20)
    x = np.zeros((40, 2), np.float32)
    x[np.arange(40), y] = 1.0
    perfect = _classifier_from_logits(2, 4 * np.eye(2))
    blind = BaseModelParams(Linear(np.zeros((2, 2), np.float32), np.zeros(2, np.float32)),
                            Linear(np.zeros((2, 2), np.float32), np.array([1.0, 0.0], np.float32)))
    user = UserState(0, x, y, np.zeros((0, 2), np.float32), x, y)
    return user, ae, [perfect, blind]


def test_mixture_prefers_perfect_base():
    user, ae, bases = _separable_setup()
    weights, model, history = aggregate_base_models(user, ae, bases, 30,
                                                    np.random.default_rng(0), lr=0.1)
    assert model.chi[0] > 0.9
    # grid oracle: the loss-minimizing mixture on a fine grid also sits above 0.9
    from semipfl.nn import cross_entropy_loss
    stacked = model.base_logits(user.x_labeled)
    grid = np.linspace(0, 1, 101)
    losses = [cross_entropy_loss(mix_logits(stacked, np.array([g, 1 - g])), user.y_labeled)[0]
              for g in grid]
    assert grid[int(np.argmin(losses))] > 0.9
    assert all(abs(c.sum() - 1) <= 1e-9 and (c >= 0).all() for c in history)


def test_mixture_single_base():
    user, ae, bases = _separable_setup()
    _, model, history = aggregate_base_models(user, ae, bases[:1], 10, np.random.default_rng(0))
    assert model.chi.tolist() == [1.0] and all(c.tolist() == [1.0] for c in history)
    np.testing.assert_array_equal(model.logits(user.x_eval),
                                  model.base_logits(user.x_eval)[0])


def test_mixture_without_labels_stays_uniform():
    user, ae, bases = _separable_setup()
    user.x_labeled, user.y_labeled = user.x_labeled[:0], user.y_labeled[:0]
    bases = bases + [bases[0].copy()]
    _, model, _ = aggregate_base_models(user, ae, bases, 10, np.random.default_rng(0))
    assert model.chi.tolist() == [1 / 3] * 3


def test_mixture_bases_stay_frozen():
    user, ae, bases = _separable_setup()
    before = [b.to_vector().tobytes() for b in bases]
    aggregate_base_models(user, ae, bases, 10, np.random.default_rng(0), lr=0.1)
    assert [b.to_vector().tobytes() for b in bases] == before


def test_mixture_rejects_inconsistent_bases():
    user, ae, bases = _separable_setup()
    odd = init_base_model(3, 2, 2, np.random.default_rng(0))
    with pytest.raises(ProtocolError):
        aggregate_base_models(user, ae, [bases[0], odd], 1, np.random.default_rng(0))
    other_classes = init_base_model(2, 2, 3, np.random.default_rng(0))
    with pytest.raises(ProtocolError):
        aggregate_base_models(user, ae, [bases[0], other_classes], 1, np.random.default_rng(0))


def test_personalized_model_is_encoder_then_mixture():
    user, ae, bases = _separable_setup()
    chi = np.array([0.3, 0.7])
    model = PersonalizedModel(ae, bases, chi)
    latent = encode(ae, user.x_eval)
    from semipfl.models import base_forward
    expected = 0.3 * base_forward(bases[0], latent) + 0.7 * base_forward(bases[1], latent)
    np.testing.assert_allclose(model.logits(user.x_eval), expected, rtol=1e-6)
    assert model.size == ae.enc1.size + ae.enc2.size + sum(b.size for b in bases)


# --- evaluation ---------------------------------------------------------------------

class _Fixed:
    def __init__(self, predictions):
        self.predictions = predictions

    def predict(self, x):
        return self.predictions


def test_evaluate_examples():
    user = _user(classes=2)
    assert evaluate(user, _Fixed(user.y_eval), 2) == (1.0, 1.0)
    user.y_eval = np.array([0, 1] * 10)
    f1, kappa = evaluate(user, _Fixed(np.zeros(20, int)), 2)
    assert kappa == 0.0
    rng = np.random.default_rng(1)
    user.y_eval = rng.integers(0, 3, 20)
    pred = rng.integers(0, 3, 20)
    cm = confusion_matrix(user.y_eval, pred, 3)
    assert evaluate(user, _Fixed(pred), 3) == (macro_f1(cm), cohen_kappa(cm))
    with pytest.raises(StateError):
        evaluate(user, None, 3)
