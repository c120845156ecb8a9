"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_volumes(X, patch_size=None, min_size=None):
    """Coerce ``X`` to a float32 array of shape (n, H, W, D)."""
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(x) for x in X])
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim == 5 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 4:
        raise ValueError(f"expected volumes of shape (n, H, W, D), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no volumes given")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"volumes must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("volumes contain NaN or infinite values")
    if min_size is not None:
        for axis, n in enumerate(X.shape[1:]):
            if n < min_size:
                raise ValueError(f"axis {axis} of size {n} smaller than {min_size}")
    if patch_size is not None:
        for axis, n in enumerate(X.shape[1:]):
            if n % patch_size:
                raise ValueError(f"axis {axis} of size {n} not divisible by patch size {patch_size}")
    return X


def check_labels(y, X, num_classes=None):
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[None]
    if y.shape != X.shape:
        raise ValueError(f"labels shape {y.shape} does not match volumes {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class ids")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    if num_classes is not None and y.max() >= num_classes:
        raise ValueError(f"label {int(y.max())} >= num_classes {num_classes}")
    return y
