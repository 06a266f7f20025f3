"""Input validation helpers shared by the functional API and the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError, DomainError

PROB_ATOL = 1e-6


def check_alpha(alpha):
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


def check_positive(value, name):
    value = float(value)
    if not value > 0.0 or not np.isfinite(value):
        raise DomainError(f"{name} must be a positive finite number, got {value}")
    return value


def check_probs(probs):
    """Return ``probs`` as a float 2-D array whose rows lie on the simplex."""
    probs = check_array(probs, dtype=np.float64, ensure_2d=True)
    if np.any(probs < -PROB_ATOL) or np.any(probs > 1.0 + PROB_ATOL):
        raise DomainError("probabilities must lie in [0, 1]")
    row_sums = probs.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-5):
        raise DomainError("probability rows must sum to 1")
    return np.clip(probs, 0.0, 1.0)


def check_scores(scores):
    scores = check_array(scores, dtype=np.float64, ensure_2d=True)
    return scores


def check_labels(labels, n_classes=None, n_samples=None):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError("labels must be one-dimensional")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        as_int = labels.astype(np.int64)
        if not np.array_equal(as_int, labels):
            raise DomainError("labels must be integers")
        labels = as_int
    labels = labels.astype(np.int64, copy=False)
    if n_samples is not None and labels.shape[0] != n_samples:
        raise DimensionError(
            f"expected {n_samples} labels, got {labels.shape[0]}"
        )
    if labels.size and labels.min() < 0:
        raise DomainError("labels must be non-negative")
    if n_classes is not None and labels.size and labels.max() >= n_classes:
        raise DomainError(f"labels must be < {n_classes}")
    return labels


def as_1d_float(values, name="values"):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional")
    return values
