"""Relaxed descending sort and the differentiable conformal quantile built on it.

Row ``i`` (1-based) of the relaxed permutation is

    softmax_j( tau * ((m + 1 - 2 i) * s_j - sum_k |s_j - s_k|) )

which concentrates on the ``i``-th largest entry of ``s`` as ``tau`` grows.
"""

import math

import numpy as np
from scipy.special import softmax

from ._validation import as_1d_float, check_alpha, check_positive
from .exceptions import CalibrationSizeError, PreconditionError


def conformal_rank(m, alpha):
    """1-based ascending order-statistic index ``ceil((m + 1)(1 - alpha))``."""
    # the guard keeps products like 10 * 0.9 from rounding up past an integer
    return int(math.ceil((m + 1) * (1.0 - alpha) - 1e-9))


def _row_logits(s, row, steepness):
    m = s.shape[0]
    abs_sums = np.abs(s[:, None] - s[None, :]).sum(axis=1)
    coef = m + 1 - 2 * (row + 1)
    return steepness * (coef * s - abs_sums), coef


def relaxed_sort(s, steepness):
    """Full ``(m, m)`` row-stochastic relaxation of the descending sort."""
    s = as_1d_float(s, "s")
    m = s.shape[0]
    if m < 1:
        raise PreconditionError("need at least one score")
    check_positive(steepness, "steepness")
    abs_sums = np.abs(s[:, None] - s[None, :]).sum(axis=1)
    coefs = m + 1 - 2 * np.arange(1, m + 1)
    logits = steepness * (coefs[:, None] * s[None, :] - abs_sums[None, :])
    return softmax(logits, axis=1)


def hard_quantile(s, alpha):
    """Conformal order statistic; ``inf`` when the sample is too small."""
    s = as_1d_float(s, "s")
    alpha = check_alpha(alpha)
    m = s.shape[0]
    k = conformal_rank(m, alpha)
    if m == 0 or k > m:
        return math.inf
    k = max(k, 1)
    return float(np.partition(s, k - 1)[k - 1])


def smooth_quantile(s, alpha, steepness):
    """Differentiable conformal quantile and its gradient w.r.t. ``s``.

    Only the one row of the relaxed sort that corresponds to the conformal
    order statistic is built, so the cost is ``O(m^2)``.
    """
    s = as_1d_float(s, "s")
    alpha = check_alpha(alpha)
    check_positive(steepness, "steepness")
    m = s.shape[0]
    if m < 1:
        raise PreconditionError("need at least one score")
    k = max(conformal_rank(m, alpha), 1)
    if k > m:
        raise CalibrationSizeError(
            f"{m} calibration scores are too few for alpha={alpha}"
        )
    row = m - k
    logits, coef = _row_logits(s, row, steepness)
    p = softmax(logits)
    value = float(p @ s)

    # d value / d s_l = p_l + sum_j w_j d f_j / d s_l,  w_j = tau p_j (s_j - value)
    w = steepness * p * (s - value)
    sign = np.sign(s[:, None] - s[None, :])  # sign(s_j - s_l); 0 on ties
    grad = p + w * (coef - sign.sum(axis=1)) + w @ sign
    return value, grad
