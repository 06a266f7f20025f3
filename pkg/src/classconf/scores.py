"""Non-conformity scores (THR, APS, RAPS), smooth set sizes and hard sets.

Score matrices are plain ``(n, K)`` float arrays: entry ``(i, y)`` is the
score of candidate label ``y`` for example ``i``. Lower means more
conforming.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ._validation import check_positive, check_probs, check_scores
from .exceptions import ConfigError, DomainError


@dataclass(frozen=True)
class SmoothingConfig:
    """Temperature of the sigmoid indicator and steepness of the relaxed sort."""

    temperature: float = 0.1
    steepness: float = 10.0

    def __post_init__(self):
        check_positive(self.temperature, "temperature")
        check_positive(self.steepness, "steepness")


def descending_ranks(probs):
    """0-based rank of every label when each row is sorted by decreasing probability.

    Ties go to the smaller class index first.
    """
    probs = np.asarray(probs, dtype=np.float64)
    # stable argsort of -p keeps index order inside ties
    order = np.argsort(-probs, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(probs.shape[0])[:, None]
    ranks[rows, order] = np.arange(probs.shape[1])[None, :]
    return ranks


def score_thr(probs):
    """``1 - p_y`` for every label."""
    return 1.0 - check_probs(probs)


def _check_u(u, n):
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), (n,)).copy()
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise DomainError("u must lie in [0, 1]")
    return u


def score_aps(probs, u=1.0):
    """Adaptive prediction set scores.

    The score of label ``y`` is the total mass of the labels ranked strictly
    above it plus ``u`` times its own mass. ``u`` is one draw per example
    (scalar or shape ``(n,)``).
    """
    probs = check_probs(probs)
    n, k = probs.shape
    u = _check_u(u, n)
    order = np.argsort(-probs, axis=1, kind="stable")
    rows = np.arange(n)[:, None]
    sorted_p = probs[rows, order]
    cum_before = np.cumsum(sorted_p, axis=1) - sorted_p
    sorted_scores = cum_before + u[:, None] * sorted_p
    scores = np.empty_like(probs)
    scores[rows, order] = sorted_scores
    return scores


def score_raps(probs, u=1.0, lambda_reg=0.01, k_reg=5):
    """APS plus ``lambda_reg * max(0, rank - k_reg)`` with 1-based ranks."""
    if lambda_reg < 0:
        raise DomainError("lambda_reg must be non-negative")
    if int(k_reg) < 1:
        raise DomainError("k_reg must be a positive integer")
    scores = score_aps(probs, u)
    ranks = descending_ranks(probs) + 1
    return scores + lambda_reg * np.maximum(0, ranks - int(k_reg))


def compute_scores(probs, kind="thr", u=1.0, lambda_reg=0.01, k_reg=5):
    if kind == "thr":
        return score_thr(probs)
    if kind == "aps":
        return score_aps(probs, u)
    if kind == "raps":
        return score_raps(probs, u, lambda_reg, k_reg)
    raise ConfigError(f"unknown score kind {kind!r}")


def smooth_set_size(scores, q, cfg):
    """Soft set sizes ``sum_y sigmoid((q - s_y) / T)`` and their gradient.

    Returns ``(sizes, dsizes_dscores)`` where the second array has the shape
    of ``scores``; the gradient w.r.t. ``q`` is minus its row sum.
    """
    scores = check_scores(scores)
    t = cfg.temperature
    sig = expit((q - scores) / t)
    sizes = sig.sum(axis=1)
    dsizes = -sig * (1.0 - sig) / t
    return sizes, dsizes


def hard_set_size(scores, q):
    return (np.asarray(scores) <= q).sum(axis=1)


def hard_set(scores_row, thresholds):
    """Labels whose score does not exceed the threshold of their group.

    ``thresholds`` is a :class:`~classconf.calibration.ConformalThresholds`
    (or anything exposing ``label_thresholds(K)``) or a plain scalar.
    """
    row = np.asarray(scores_row, dtype=np.float64).ravel()
    per_label = _label_thresholds(thresholds, row.shape[0])
    return {int(y) for y in np.flatnonzero(row <= per_label)}


def _label_thresholds(thresholds, n_classes):
    if np.isscalar(thresholds):
        return np.full(n_classes, float(thresholds))
    if not hasattr(thresholds, "label_thresholds"):
        raise ConfigError("thresholds must be a scalar or ConformalThresholds")
    return thresholds.label_thresholds(n_classes)
