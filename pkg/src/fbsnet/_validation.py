"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

IGNORE_LABEL = 255


def check_images(X, dtype=np.float32):
    """Return ``X`` as a C-contiguous (N, 3, H, W) array of ``dtype``.

    A single (3, H, W) image is promoted to a batch of one. H and W must be
    multiples of 8 because the encoder downsamples three times.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, 3, H, W), got {X.shape}")
    if X.shape[1] != 3:
        raise ValueError(f"expected 3 colour channels on axis 1, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    h, w = X.shape[2:]
    if h % 8 or w % 8:
        raise ValueError(f"image size {h}x{w} must be divisible by 8")
    if not np.issubdtype(X.dtype, np.number) or np.issubdtype(X.dtype, np.complexfloating):
        raise TypeError(f"images must be real numbers, got dtype {X.dtype}")
    X = np.ascontiguousarray(X, dtype=dtype)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    return X


def check_labels(y, X, num_classes=None):
    """Return ``y`` as (N, H, W) int64 matching ``X``; ids in [0, K) or the ignore label."""
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3 or y.shape != (X.shape[0], *X.shape[2:]):
        raise ValueError(f"labels {y.shape} do not match images {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.array_equal(y, np.round(y)):
            raise ValueError("labels must be integer class ids")
    y = y.astype(np.int64)
    valid = y[y != IGNORE_LABEL]
    if valid.size == 0:
        raise ValueError("every pixel is ignored")
    if valid.min() < 0:
        raise ValueError(f"negative label id {int(valid.min())}")
    if num_classes is not None and valid.max() >= num_classes:
        raise ValueError(f"label id {int(valid.max())} outside [0, {num_classes})")
    return y


def check_positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
