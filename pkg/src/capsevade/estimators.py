"""Scikit-learn style front end over the functional core.

``SurrogateEncoder`` and ``PresenceKMeans`` follow the fit/transform/
predict conventions (including ``get_params``), so the pipeline composes
with the usual model-selection tooling. ``EvasionAttack`` holds attack
hyperparameters the same way but exposes ``generate`` instead of
``predict``, matching how attack libraries are driven.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from capsevade import attack as atk
from capsevade import classifier as clf
from capsevade import encoder as enc
from capsevade._validation import check_images, check_labels


class SurrogateEncoder(BaseEstimator):
    """Trainable capsule-presence encoder with a fit/transform interface."""

    def __init__(
        self,
        n_capsules=10,
        n_parts=24,
        learning_rate=3e-5,
        momentum=0.9,
        epsilon=1e-6,
        decay_steps=10000,
        decay_rate=0.96,
        batch_size=100,
        epochs=1500,
        seed=0,
    ):
        self.n_capsules = n_capsules
        self.n_parts = n_parts
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epsilon = epsilon
        self.decay_steps = decay_steps
        self.decay_rate = decay_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def _train_config(self) -> enc.TrainConfig:
        return enc.TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            epsilon=self.epsilon,
            decay_steps=self.decay_steps,
            decay_rate=self.decay_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, self.n_capsules, n_expected=len(X))
        self.params_ = enc.train(
            self._train_config(), X, y, self.n_capsules, self.n_parts
        )
        return self

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("SurrogateEncoder is not fitted yet")

    def presence(self, X, mode: str = enc.PRIOR) -> np.ndarray:
        """Presence vectors, one row per image."""
        self._require_fitted()
        X = check_images(X)
        return np.stack([enc.presence_for(self.params_, x, mode) for x in X])

    def transform(self, X) -> np.ndarray:
        return self.presence(X, enc.PRIOR)

    def encode(self, x) -> enc.CapsuleOutput:
        self._require_fitted()
        return enc.encode(self.params_, x)


class PresenceKMeans(BaseEstimator, ClassifierMixin):
    """Unsupervised presence classifier: k-means clusters matched to labels."""

    def __init__(self, n_clusters=10, mode=enc.PRIOR, seed=0):
        self.n_clusters = n_clusters
        self.mode = mode
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = check_labels(y, self.n_clusters, n_expected=len(X))
        kmeans = clf.kmeans_fit(X, self.n_clusters, self.seed)
        clusters = clf.assign_many(kmeans, X)
        permutation = clf.fit_permutation(clusters, y, self.n_clusters)
        self.model_ = clf.ClassifierModel(
            kmeans=kmeans, permutation=permutation, mode=self.mode
        )
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("PresenceKMeans is not fitted yet")
        return clf.classify_many(self.model_, np.asarray(X, dtype=np.float64))


class EvasionAttack(BaseEstimator):
    """Configured perturbation generator bound to an encoder/classifier pair."""

    def __init__(
        self,
        encoder=None,
        classifier=None,
        algorithm="opt",
        alpha=None,
        n_iter=None,
        n_outer=9,
        n_inner=300,
        mask=True,
        seed=0,
    ):
        self.encoder = encoder
        self.classifier = classifier
        self.algorithm = algorithm
        self.alpha = alpha
        self.n_iter = n_iter
        self.n_outer = n_outer
        self.n_inner = n_inner
        self.mask = mask
        self.seed = seed

    def _config(self) -> atk.AttackConfig:
        return atk.AttackConfig(
            algorithm=self.algorithm,
            alpha=self.alpha,
            n_iter=self.n_iter,
            n_outer=self.n_outer,
            n_inner=self.n_inner,
            mask=self.mask,
            seed=self.seed,
        )

    def _models(self):
        params = getattr(self.encoder, "params_", self.encoder)
        model = getattr(self.classifier, "model_", self.classifier)
        if params is None or model is None:
            raise NotFittedError("EvasionAttack needs an encoder and a classifier")
        return params, model

    def generate(self, x) -> atk.AttackResult:
        """Attack one image; returns the full result with its trace."""
        params, model = self._models()
        x = np.asarray(x, dtype=np.float64)
        target = atk.make_target(params, model, x)
        return atk.run_attack(target, x, self._config())

    def generate_many(self, X) -> list[atk.AttackResult]:
        return [self.generate(x) for x in np.asarray(X, dtype=np.float64)]
