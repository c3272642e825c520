"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_array
from sklearn.utils.validation import check_consistent_length

from .data import DESC_DIM


def check_descriptors(X, dim: int = DESC_DIM) -> np.ndarray:
    """2-D float array of condition descriptors with ``dim`` columns."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != dim:
        raise ValueError(f"descriptors need {dim} columns, got {X.shape[1]}")
    return X


def check_point_sets(y, min_points: int = 1) -> np.ndarray:
    """(n_sets, n_points, 3) float array with finite entries."""
    y = check_array(y, dtype=np.float64, allow_nd=True, ensure_2d=False)
    if y.ndim != 3 or y.shape[-1] != 3:
        raise ValueError(f"point sets must have shape (n_sets, n_points, 3), got {y.shape}")
    if y.shape[1] < min_points:
        raise ValueError(f"point sets need at least {min_points} points, got {y.shape[1]}")
    return y


def check_training_pairs(X, y, min_points: int = 8):
    X = check_descriptors(X)
    y = check_point_sets(y, min_points)
    check_consistent_length(X, y)
    return X, y


def check_seed(seed) -> int:
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, numbers.Integral) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)


def check_steps(steps) -> int:
    if isinstance(steps, (bool, np.bool_)) or not isinstance(steps, numbers.Integral) or steps < 1:
        raise ValueError(f"steps must be an integer >= 1, got {steps!r}")
    return int(steps)
