"""Input validation helpers shared by the estimator API and the CLI."""
from __future__ import annotations

import numpy as np

from .nncore import ShapeError


def check_signals(X, n_channels: int | None = None, min_length: int = 1, dtype=np.float64) -> np.ndarray:
    """Validate a ``[N, C, T]`` waveform stack and return it as a float array."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError("check_signals", "rank", 3, X.ndim)
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"expected numeric signals, got {X.dtype}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ShapeError("check_signals", "channel", n_channels, X.shape[1])
    if X.shape[2] < min_length:
        raise ValueError(f"signals have {X.shape[2]} samples, need at least {min_length}")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("signals contain NaN or infinite values")
    return X


def check_labels(y, n_samples: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError("check_labels", "rank", 1, y.ndim)
    if n_samples is not None and len(y) != n_samples:
        raise ShapeError("check_labels", "batch", n_samples, len(y))
    return y


def check_signals_labels(X, y, n_channels: int | None = None):
    X = check_signals(X, n_channels)
    return X, check_labels(y, len(X))


def check_positive(name: str, value, allow_zero: bool = False):
    if value is None or (value < 0 if allow_zero else value <= 0):
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return value
