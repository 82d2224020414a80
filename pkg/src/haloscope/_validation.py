"""Small input checks shared by the estimators."""
from __future__ import annotations

import numbers

import numpy as np

from .model import FloatSeries, SampleSeries, as_millivolts


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        else:
            raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_positive(value, name):
    value = float(value)
    if not value > 0 or not np.isfinite(value):
        raise ValueError(f"{name} must be a positive finite number, got {value}")
    return value


def check_series(x, sample_rate=None, min_length=1):
    """Return ``(values_mV, sample_rate)`` for a series or 1-D array."""
    values, rate = as_millivolts(x, sample_rate)
    if values.ndim != 1:
        raise ValueError(f"expected a 1-D series, got shape {values.shape}")
    if values.shape[0] < min_length:
        raise ValueError(f"series has {values.shape[0]} samples, need at least {min_length}")
    if not isinstance(x, (SampleSeries, FloatSeries)) and not np.all(np.isfinite(values)):
        raise ValueError("series contains non-finite values")
    return values, rate


def check_segments(X):
    """Coerce a batch of equal-length segments to a 2-D float array."""
    if isinstance(X, (SampleSeries, FloatSeries)):
        return X.millivolts()[None, :]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], (SampleSeries, FloatSeries)):
        return np.stack([s.millivolts() for s in X])
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected 1-D or 2-D input, got shape {arr.shape}")
    return arr
