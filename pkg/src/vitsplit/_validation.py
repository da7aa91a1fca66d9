"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .tensor_math import DTYPE


def check_features(X, n_features: int | None = None) -> np.ndarray:
    X = check_array(X, dtype=DTYPE)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be 1-d with {n_samples} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class indices")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    return y


def check_images(X, config) -> np.ndarray:
    """Validate a batch of [channels, H, W] images against ``config``."""
    X = check_array(X, dtype=DTYPE, allow_nd=True, ensure_2d=False)
    expected = (config.channels, config.image_size, config.image_size)
    if X.ndim != 4 or X.shape[1:] != expected:
        raise ValueError(f"expected images of shape (n, {', '.join(map(str, expected))}), got {X.shape}")
    return X
