"""Input validation shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, input_shape=None):
    """Float64 batch of samples, optionally checked against ``input_shape``."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if input_shape is not None and X.shape[1:] != tuple(input_shape):
        raise ValueError(f"expected samples of shape {tuple(input_shape)}, got {X.shape[1:]}")
    return X


def check_labels(y, n_samples, n_classes=None):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"expected {n_samples} labels, got shape {y.shape}")
    if not np.all(np.equal(np.mod(y, 1), 0)) or np.any(y < 0):
        raise ValueError("labels must be non-negative integer class indices")
    if n_classes is not None and np.any(y >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.intp)
