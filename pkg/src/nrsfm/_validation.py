"""Input checks shared by the estimator."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_array

from .tracking import TrackingMatrix


def check_tracking(X) -> TrackingMatrix:
    """Accept a :class:`TrackingMatrix` or a ``(2m, n)`` array with NaN for
    missing points."""
    if isinstance(X, TrackingMatrix):
        return X
    A = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan", ensure_min_samples=2)
    if A.shape[0] % 2:
        raise ValueError(f"tracking array needs an even number of rows, got {A.shape[0]}")
    if np.isinf(A).any():
        raise ValueError("tracking array contains infinite values")
    return TrackingMatrix.from_array(A)


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
