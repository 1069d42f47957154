"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted  # noqa: F401  (re-exported)

from .exceptions import DimensionError, ParameterError


def check_mel(mel, n_mels=80, min_frames=1, name="mel"):
    """Return ``mel`` as a finite float32 ``(T, n_mels)`` array."""
    arr = np.asarray(mel, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] != n_mels:
        raise DimensionError(f"{name} must have shape (T, {n_mels}), got {arr.shape}")
    if arr.shape[0] < min_frames:
        raise DimensionError(f"{name} has {arr.shape[0]} frames, needs at least {min_frames}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    return arr


def check_mel_list(X, n_mels=80, min_frames=1):
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    return [check_mel(m, n_mels, min_frames, name=f"mel[{k}]") for k, m in enumerate(X)]


def check_labels(y, n):
    labels = list(y)
    if len(labels) != n:
        raise DimensionError(f"got {len(labels)} labels for {n} samples")
    return labels


def check_embeddings(E, dim=None):
    arr = np.asarray(E, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"embeddings must be 2-D (n, d), got {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionError(f"embedding width {arr.shape[1]} != expected {dim}")
    return arr


def require_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit() first")
