#!/usr/bin/env python3
"""
Tests for linear probes on frozen features
"""

import numpy as np
import pytest

from src.core.exceptions import DatasetError, PoolError
from src.core.models import Perturbation, PerturbationKind, ProbeWeights
from src.services import probe_service
from src.services.probe_service import FeatureCache


def _separable(n_per_class=20, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[4.0, 0.0], [0.0, 4.0], [-4.0, -4.0]])
    features = np.concatenate([c + rng.normal(0, 0.3, (n_per_class, 2)) for c in centers])
    labels = np.repeat(np.arange(3), n_per_class)
    return features, labels


def test_separable_features_are_fitted_exactly():
    features, labels = _separable()
    probe = probe_service.fit_linear(features, labels, 3, epochs=200, lr=5e-2, seed=0)
    assert probe_service.accuracy_on_features(probe, features, labels) == 1.0


def test_zero_probe_is_uniform_and_picks_first_class():
    probe = ProbeWeights(np.zeros((4, 3)), np.zeros(4), "m")
    label, probs = probe_service.predict(probe, np.array([1.0, -2.0, 3.0]))
    assert label == 0
    np.testing.assert_allclose(probs, np.full(4, 0.25))


def test_probabilities_sum_to_one_and_ignore_shifts():
    logits = np.array([[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]])
    probs = probe_service.softmax(logits)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0)
    np.testing.assert_allclose(probe_service.softmax(logits + 100.0), probs)


def test_refit_is_deterministic():
    features, labels = _separable()
    a = probe_service.fit_linear(features, labels, 3, epochs=20, lr=1e-2, seed=4)
    b = probe_service.fit_linear(features, labels, 3, epochs=20, lr=1e-2, seed=4)
    np.testing.assert_array_equal(a.weight, b.weight)
    np.testing.assert_array_equal(a.bias, b.bias)


def test_single_class_training_set_is_rejected():
    with pytest.raises(DatasetError):
        probe_service.fit_linear(np.ones((5, 2)), np.zeros(5), 3, epochs=1, lr=1e-2, seed=0)


def test_probe_is_owned_by_its_model(tiny_probe, tiny_model):
    assert tiny_probe.owner_id == tiny_model.model_id
    assert tiny_probe.weight.shape == (3, tiny_model.config.embed_dim)


def test_no_perturbation_equals_zero_perturbation(tiny_model, tiny_probe, tiny_data):
    _, test = tiny_data
    zero = Perturbation(np.zeros(test.image_shape), 10.0, PerturbationKind.UTAP)
    cache = FeatureCache()
    clean = probe_service.accuracy(tiny_model, tiny_probe, test, None, cache)
    assert probe_service.accuracy(tiny_model, tiny_probe, test, zero, cache) == clean
    # identical images hit the same cache entry
    assert len(cache) == 1


def test_foreign_probe_is_rejected(tiny_probe, second_model, tiny_data):
    with pytest.raises(PoolError):
        probe_service.accuracy(second_model, tiny_probe, tiny_data[1])


def test_probability_table_columns(tiny_model, tiny_probe, tiny_data):
    _, test = tiny_data
    frame = probe_service.probability_table(tiny_model, tiny_probe, test, condition="clean")
    assert list(frame.columns) == ["model_id", "image_index", "label", "condition", "prediction", "p0", "p1", "p2"]
    assert len(frame) == len(test)
    np.testing.assert_allclose(frame[["p0", "p1", "p2"]].sum(axis=1), 1.0, rtol=1e-6)
    assert (frame["prediction"] == frame[["p0", "p1", "p2"]].to_numpy().argmax(axis=1)).all()
