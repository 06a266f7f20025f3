"""Training objectives that simulate conformal calibration inside a mini-batch.

Every conformal objective follows the same recipe: split the batch into a
calibration half and a prediction half, take a smooth quantile of the
true-label scores on the calibration half, and penalise the smooth set sizes
of the prediction half. Scores during training are negative log
probabilities. Gradients are assembled in score space and pulled back to the
logits, then to the parameters by :func:`classconf.model.backward`.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, log_softmax

from . import alm as alm_mod
from . import model as model_mod
from ._validation import check_alpha
from .exceptions import ConfigError, DomainError, PreconditionError
from .scores import SmoothingConfig, smooth_set_size
from .smoothsort import smooth_quantile

CUT_GRID = np.linspace(0.0, 1.0, 101)
OBJECTIVES = ("ce", "fl", "conftr", "cut", "cact", "cact_hr")


@dataclass
class BatchSplit:
    cal_indices: np.ndarray
    pred_indices: np.ndarray


@dataclass(frozen=True)
class SizeLossConfig:
    """Target size ``eta``, training mis-coverage and smoothing constants."""

    eta: float = 1.0
    alpha_train: float = 0.01
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)

    def __post_init__(self):
        if self.eta < 0:
            raise DomainError("eta must be non-negative")
        check_alpha(self.alpha_train)


def split_batch(batch_size, fraction, rng):
    """Random calibration/prediction split of ``range(batch_size)``."""
    n = int(batch_size)
    if n < 2:
        raise PreconditionError("a batch needs at least two examples to split")
    n_cal = int(np.clip(round(fraction * n), 1, n - 1))
    perm = rng.permutation(n)
    return BatchSplit(np.sort(perm[:n_cal]), np.sort(perm[n_cal:]))


def conftr_size_loss(scores_pred, q_smooth, cfg):
    """Mean hinge ``max(0, softsize - eta)`` over the prediction half.

    Returns ``(loss, dloss_dscores, dloss_dq)``.
    """
    if not np.isfinite(q_smooth):
        raise DomainError("the smooth threshold must be finite")
    scores_pred = np.asarray(scores_pred, dtype=np.float64)
    n = scores_pred.shape[0]
    sizes, dsizes = smooth_set_size(scores_pred, q_smooth, cfg.smoothing)
    excess = sizes - cfg.eta
    active = excess > 0
    loss = float(np.maximum(excess, 0.0).sum() / n)
    dsize = active / n
    dscores = dsize[:, None] * dsizes
    dq = -dscores.sum()
    return loss, dscores, dq


def classwise_size_terms(scores_pred, labels_pred, q_smooth, cfg, n_classes):
    """Per-class mean soft set size on the prediction half.

    Returns ``(d_hat, counts, sizes, dsizes)``: ``d_hat[k]`` is NaN for
    classes absent from the batch; ``sizes`` and ``dsizes`` are the per-example
    soft sizes and their score gradients, from which any function of
    ``d_hat`` can be differentiated.
    """
    scores_pred = np.asarray(scores_pred, dtype=np.float64)
    labels_pred = np.asarray(labels_pred, dtype=np.int64)
    sizes, dsizes = smooth_set_size(scores_pred, q_smooth, cfg.smoothing)
    counts = np.bincount(labels_pred, minlength=n_classes).astype(np.float64)
    sums = np.bincount(labels_pred, weights=sizes, minlength=n_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        d_hat = np.where(counts > 0, sums / counts, np.nan)
    return d_hat, counts, sizes, dsizes


def cact_loss(d_hat, state, kind="phr", eta=None):
    """``sum_k P(d_k / eta - 1, lam_k, rho_k)`` over classes present in ``d_hat``.

    Returns ``(value, dvalue_dd)`` with zeros for absent classes.
    """
    eta = state.eta if eta is None else eta
    if not eta > 0:
        raise DomainError("eta must be positive for the normalised constraint")
    d_hat = np.asarray(d_hat, dtype=np.float64)
    present = np.isfinite(d_hat)
    z = np.where(present, d_hat / eta - 1.0, 0.0)
    pen = alm_mod.penalty(kind, z, state.lam, state.rho)
    dpen = alm_mod.penalty_prime(kind, z, state.lam, state.rho) / eta
    value = float(np.where(present, pen, 0.0).sum())
    return value, np.where(present, dpen, 0.0)


def weighted_size_loss(scores_pred, labels_pred, q_smooth, cfg, weights):
    """Class-weighted hinge ``(1/n) sum_y w_y sum_{i in I_y} max(0, softsize_i - eta)``.

    With every weight equal to ``w`` this is ``w`` times the ConfTr size loss.
    Returns ``(loss, dloss_dscores, dloss_dq, per_class_hinge_sums)``.
    """
    scores_pred = np.asarray(scores_pred, dtype=np.float64)
    labels_pred = np.asarray(labels_pred, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n = scores_pred.shape[0]
    sizes, dsizes = smooth_set_size(scores_pred, q_smooth, cfg.smoothing)
    excess = sizes - cfg.eta
    hinge = np.maximum(excess, 0.0)
    w = weights[labels_pred]
    loss = float((w * hinge).sum() / n)
    dsize = w * (excess > 0) / n
    dscores = dsize[:, None] * dsizes
    per_class = np.bincount(labels_pred, weights=hinge, minlength=weights.shape[0]) / n
    return loss, dscores, -dscores.sum(), per_class


def cut_loss_hard(true_scores):
    """Exact Kolmogorov-Smirnov distance of the scores' ECDF from Uniform(0, 1)."""
    s = np.asarray(true_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise PreconditionError("need at least one score")
    s = _clamp_unit(s)
    s = np.sort(s)
    n = s.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - s), np.max(s - (i - 1) / n), 0.0))


def cut_loss_smooth(true_scores, temperature):
    """Sigmoid-smoothed ECDF deviation, maximised over a 101-point grid.

    Returns ``(loss, dloss_dscores)``.
    """
    s = np.asarray(true_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise PreconditionError("need at least one score")
    inside = (s >= 0.0) & (s <= 1.0)
    s = _clamp_unit(s)
    n = s.size
    sig = expit((CUT_GRID[:, None] - s[None, :]) / temperature)  # (grid, n)
    dev = sig.mean(axis=1) - CUT_GRID
    g = int(np.argmax(np.abs(dev)))
    loss = float(abs(dev[g]))
    sign = np.sign(dev[g])
    grad = -sign * sig[g] * (1.0 - sig[g]) / (temperature * n)
    return loss, grad * inside


def _clamp_unit(s):
    if np.any(s < 0.0) or np.any(s > 1.0):
        warnings.warn("CUT scores outside [0, 1] were clamped", RuntimeWarning, stacklevel=3)
        s = np.clip(s, 0.0, 1.0)
    return s


@dataclass
class ObjectiveConfig:
    """Which objective to train with, and its constants.

    ``reg_weight`` is the fixed weight of the ConfTr and CUT terms.
    ``alm`` / ``hr`` carry the multiplier state of the class-adaptive
    objectives; ``penalty`` names the penalty function used with ``alm``.
    """

    kind: str = "ce"
    size: SizeLossConfig = field(default_factory=SizeLossConfig)
    reg_weight: float = 0.05
    focal_gamma: float = 3.0
    penalty: str = "phr"
    cal_fraction: float = 0.5
    cls_on_pred_only: bool = True
    alm: Optional[alm_mod.AlmState] = None
    hr: Optional[alm_mod.HrState] = None

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.kind!r}")
        if self.kind == "cact" and self.alm is None:
            raise ConfigError("the cact objective needs an AlmState")
        if self.kind == "cact_hr" and self.hr is None:
            raise ConfigError("the cact_hr objective needs an HrState")


def _score_grad_to_logits(dscores, p):
    """Pull dL/ds back to dL/dz for s = -log softmax(z)."""
    return -dscores + p * dscores.sum(axis=1, keepdims=True)


def total_training_loss(params, inputs, labels, cfg, split=None, rng=None):
    """Objective value, parameter gradients and a dict of diagnostics.

    ``split`` fixes the calibration/prediction partition; otherwise one is
    drawn from ``rng``. For ``ce``/``fl`` the whole batch is used.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = inputs.shape[0]
    if n == 0:
        raise PreconditionError("empty batch")
    if cfg.kind in ("ce", "fl"):
        loss_kind = "cross_entropy" if cfg.kind == "ce" else "focal"
        loss, grads = model_mod.loss_and_grad(
            params, inputs, labels, loss_kind, cfg.focal_gamma
        )
        return loss, grads, {"cls_loss": loss, "conf_loss": 0.0}

    if split is None:
        if rng is None:
            raise PreconditionError("conformal objectives need a split or an rng")
        split = split_batch(n, cfg.cal_fraction, rng)
    cal, pred = split.cal_indices, split.pred_indices

    activations = model_mod._forward_cache(params, inputs)
    logits = activations[-1]
    k = logits.shape[1]
    log_p = log_softmax(logits, axis=1)
    p = np.exp(log_p)
    scores = -log_p
    dscores = np.zeros_like(scores)
    dlogits = np.zeros_like(logits)

    cls_idx = pred if cfg.cls_on_pred_only else np.arange(n)
    cls_loss, dcls = model_mod.classification_loss(logits[cls_idx], labels[cls_idx])
    dlogits[cls_idx] += dcls

    info = {"cls_loss": cls_loss}
    size_cfg = cfg.size

    if cfg.kind == "cut":
        thr = 1.0 - p[pred, labels[pred]]
        conf, dthr = cut_loss_smooth(thr, size_cfg.smoothing.temperature)
        # thr = 1 - p_y; dp_y/dz_j = p_y (1[j=y] - p_j)
        py = p[pred, labels[pred]]
        onehot = np.zeros((pred.size, k))
        onehot[np.arange(pred.size), labels[pred]] = 1.0
        dlogits[pred] += cfg.reg_weight * (-dthr * py)[:, None] * (onehot - p[pred])
        loss = cls_loss + cfg.reg_weight * conf
        info["conf_loss"] = conf
        return loss, model_mod.backward(params, inputs, dlogits, activations), info

    cal_true = scores[cal, labels[cal]]
    q, dq_dcal = smooth_quantile(cal_true, size_cfg.alpha_train, size_cfg.smoothing.steepness)
    info["q"] = q
    s_pred = scores[pred]

    if cfg.kind == "conftr":
        conf, ds_pred, dq = conftr_size_loss(s_pred, q, size_cfg)
        weight = cfg.reg_weight
        conf_term = weight * conf
        ds_pred = weight * ds_pred
        dq = weight * dq
    elif cfg.kind == "cact":
        d_hat, _, sizes, dsizes = classwise_size_terms(s_pred, labels[pred], q, size_cfg, k)
        conf_term, dpen_dd = cact_loss(d_hat, cfg.alm, cfg.penalty, size_cfg.eta)
        counts = np.bincount(labels[pred], minlength=k)
        # d d_k / d size_i = 1 / n_k for i in class k
        dsize = dpen_dd[labels[pred]] / counts[labels[pred]]
        ds_pred = dsize[:, None] * dsizes
        dq = -ds_pred.sum()
        info["d_hat"] = d_hat
        info["soft_size"] = float(sizes.mean())
    else:  # cact_hr
        conf_term, ds_pred, dq, per_class = weighted_size_loss(
            s_pred, labels[pred], q, size_cfg, cfg.hr.lam
        )
        info["class_penalty"] = per_class

    dscores[pred] += ds_pred
    dscores[cal, labels[cal]] += dq * dq_dcal
    dlogits += _score_grad_to_logits(dscores, p)
    info["conf_loss"] = conf_term
    loss = cls_loss + conf_term
    return loss, model_mod.backward(params, inputs, dlogits, activations), info
