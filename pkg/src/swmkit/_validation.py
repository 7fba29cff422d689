"""Input validation shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .tensor_nn import ShapeError


def check_images(X, net=None) -> np.ndarray:
    """Float32 array of samples; with ``net`` given, per-sample shape must match its input."""
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float32)
    if net is not None:
        if X.shape == net.input_shape:
            X = X[None]
        if X.shape[1:] != net.input_shape:
            raise ShapeError(f"expected samples of shape {net.input_shape}, got {X.shape[1:]}")
    return X


def check_images_labels(X, y):
    X = check_images(X)
    y = check_array(y, ensure_2d=False, dtype=None).reshape(-1)
    check_consistent_length(X, y)
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    return X, y.astype(np.int64)
