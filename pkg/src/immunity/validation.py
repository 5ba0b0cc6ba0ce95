"""Input validation helpers shared by the estimator and CLI surfaces."""

from __future__ import annotations

import numpy as np


def check_image_batch(X, name: str = "X") -> np.ndarray:
    """Validate a (n_samples, channels, height, width) pixel batch in [0, 1]
    and return it as float64."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"{name} must be 4-D (n_samples, channels, height, width), "
                         f"got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} pixels must lie in [0, 1], "
                         f"got range [{X.min()}, {X.max()}]")
    return X


def check_labels(y, n_samples: int, name: str = "y") -> np.ndarray:
    """Validate integer class labels aligned with a batch."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"{name} must be 1-D with {n_samples} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.rint(np.asarray(y, dtype=np.float64))
        if not np.array_equal(rounded, np.asarray(y, dtype=np.float64)):
            raise ValueError(f"{name} must contain integer class labels")
        y = rounded
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError(f"{name} labels must be non-negative, got {y.min()}")
    return y
