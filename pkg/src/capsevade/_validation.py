"""Input validation helpers shared by the estimator layer."""

from __future__ import annotations

import numpy as np

_TOL = 1e-9


def check_images(X) -> np.ndarray:
    """Coerce to a float64 (N, H, W) stack with pixels in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None, :, :]
    if X.ndim != 3:
        raise ValueError(f"expected (N, H, W) images, got shape {X.shape}")
    if X.size == 0:
        raise ValueError("image stack is empty")
    if X.min() < -_TOL or X.max() > 1.0 + _TOL:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_labels(y, n_classes: int, n_expected: int | None = None) -> np.ndarray:
    """Coerce to an int64 label vector in 0..n_classes-1."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"expected a 1-D label vector, got shape {y.shape}")
    if n_expected is not None and len(y) != n_expected:
        raise ValueError(f"expected {n_expected} labels, got {len(y)}")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    return y
