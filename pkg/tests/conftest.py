"""Shared fixtures: a fast small pipeline and the full-size trained one."""

from __future__ import annotations

import numpy as np
import pytest

from capsevade import classifier as clf
from capsevade import encoder as enc
from capsevade import harness


def fit_presence_classifier(params, dataset, mode, k, seed=0):
    presences = np.stack(
        [enc.presence_for(params, x, mode) for x in dataset.images]
    )
    kmeans = clf.kmeans_fit(presences, k, seed)
    clusters = clf.assign_many(kmeans, presences)
    permutation = clf.fit_permutation(clusters, dataset.labels, k)
    return clf.ClassifierModel(kmeans=kmeans, permutation=permutation, mode=mode)


@pytest.fixture(scope="session")
def small_data():
    return harness.toy_dataset(n_train=240, n_test=80, n_classes=4, seed=11)


@pytest.fixture(scope="session")
def small_pipeline(small_data):
    """Quickly trained 4-class pipeline for unit tests."""
    train_set, test_set = small_data
    config = enc.TrainConfig(epochs=400, batch_size=60, seed=11)
    params = enc.train(config, train_set.images, train_set.labels, 4, n_parts=6)
    models = {
        mode: fit_presence_classifier(params, train_set, mode, 4)
        for mode in (enc.PRIOR, enc.POSTERIOR)
    }
    return params, models, train_set, test_set


@pytest.fixture(scope="session")
def toy_data():
    return harness.toy_dataset(seed=42)


@pytest.fixture(scope="session")
def trained_pipeline(toy_data):
    """The full 10-class pipeline used by the acceptance suite."""
    train_set, test_set = toy_data
    config = enc.TrainConfig(seed=42)
    params = enc.train(config, train_set.images, train_set.labels, 10)
    models = {
        mode: fit_presence_classifier(params, train_set, mode, 10)
        for mode in (enc.PRIOR, enc.POSTERIOR)
    }
    return params, models, train_set, test_set
