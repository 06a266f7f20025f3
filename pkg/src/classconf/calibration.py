"""Post-hoc conformal calibration: marginal, label-conditional and cluster-conditional."""

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.cluster import KMeans

from ._validation import as_1d_float, check_alpha, check_labels
from .exceptions import ConfigError, DimensionError
from .scores import check_scores
from .smoothsort import hard_quantile

NULL_CLUSTER = -1
CLUSTER_EMBED_LEVELS = (0.5, 0.6, 0.7, 0.8, 0.9)

_MODES = ("marginal", "per_label", "per_cluster")


@dataclass
class ConformalThresholds:
    """Calibrated thresholds for one of the three modes.

    Only the fields belonging to ``mode`` are populated; ``label_thresholds``
    turns any mode into one threshold per label. In ``per_cluster`` mode
    ``cluster_of_label[y] == -1`` sends label ``y`` to the null group.
    """

    mode: str
    alpha: float
    marginal: Optional[float] = None
    per_label: Optional[np.ndarray] = None
    cluster_of_label: Optional[np.ndarray] = None
    per_cluster: Optional[np.ndarray] = None
    null_threshold: Optional[float] = None

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(f"unknown threshold mode {self.mode!r}")
        populated = {
            "marginal": self.marginal is not None,
            "per_label": self.per_label is not None,
            "per_cluster": self.per_cluster is not None,
        }
        for mode, is_set in populated.items():
            if is_set != (mode == self.mode):
                raise ConfigError(
                    f"mode {self.mode!r} must populate exactly its own fields"
                )
        if self.mode == "per_cluster" and (
            self.cluster_of_label is None or self.null_threshold is None
        ):
            raise ConfigError("per_cluster thresholds need cluster_of_label and null_threshold")
        if self.per_label is not None:
            self.per_label = np.asarray(self.per_label, dtype=np.float64)
        if self.per_cluster is not None:
            self.per_cluster = np.asarray(self.per_cluster, dtype=np.float64)
        if self.cluster_of_label is not None:
            self.cluster_of_label = np.asarray(self.cluster_of_label, dtype=np.int64)

    def label_thresholds(self, n_classes):
        if self.mode == "marginal":
            return np.full(n_classes, float(self.marginal))
        if self.mode == "per_label":
            _check_count(self.per_label.shape[0], n_classes, "threshold")
            return self.per_label
        _check_count(self.cluster_of_label.shape[0], n_classes, "cluster assignment")
        clusters = self.cluster_of_label
        if np.any(clusters >= self.per_cluster.shape[0]):
            raise ConfigError("cluster index without a threshold")
        out = np.full(n_classes, float(self.null_threshold))
        member = clusters != NULL_CLUSTER
        out[member] = self.per_cluster[clusters[member]]
        return out

    def to_dict(self):
        def enc(x):
            if x is None:
                return None
            if np.ndim(x) == 0:
                return _enc_float(float(x))
            return [_enc_float(float(v)) if not isinstance(v, (int, np.integer)) else int(v)
                    for v in np.asarray(x).tolist()]

        return {
            "mode": self.mode,
            "alpha": self.alpha,
            "marginal": enc(self.marginal),
            "per_label": enc(self.per_label),
            "cluster_of_label": None if self.cluster_of_label is None
            else [int(c) for c in self.cluster_of_label],
            "per_cluster": enc(self.per_cluster),
            "null_threshold": enc(self.null_threshold),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data):
        def dec(x):
            if x is None:
                return None
            if isinstance(x, list):
                return np.array([_dec_float(v) for v in x], dtype=np.float64)
            return _dec_float(x)

        return cls(
            mode=data["mode"],
            alpha=float(data["alpha"]),
            marginal=dec(data.get("marginal")),
            per_label=dec(data.get("per_label")),
            cluster_of_label=None if data.get("cluster_of_label") is None
            else np.asarray(data["cluster_of_label"], dtype=np.int64),
            per_cluster=dec(data.get("per_cluster")),
            null_threshold=dec(data.get("null_threshold")),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _check_count(have, need, what):
    if have < need:
        raise ConfigError(f"no {what} for labels >= {have}")
    if have > need:
        raise DimensionError(f"{have} {what}s for {need} score columns")


def _enc_float(x):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _dec_float(x):
    return float(x)  # float("inf") parses the string form


def true_label_scores(scores, labels):
    scores = check_scores(scores)
    labels = check_labels(labels, scores.shape[1], scores.shape[0])
    return scores[np.arange(scores.shape[0]), labels]


def calibrate_split(cal_scores, alpha):
    """Marginal threshold from the true-label scores of the calibration set."""
    cal_scores = as_1d_float(cal_scores, "cal_scores")
    alpha = check_alpha(alpha)
    return ConformalThresholds("marginal", alpha, marginal=hard_quantile(cal_scores, alpha))


def _class_too_small(n_y, alpha):
    return n_y < (1.0 / alpha) - 1.0


def calibrate_label(cal_scores, labels, alpha, n_classes=None):
    """One threshold per class; classes with ``n_y < 1/alpha - 1`` get ``inf``."""
    cal_scores = as_1d_float(cal_scores, "cal_scores")
    alpha = check_alpha(alpha)
    labels = check_labels(labels, n_classes, cal_scores.shape[0])
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    per_label = np.full(n_classes, math.inf)
    for y in range(n_classes):
        s_y = cal_scores[labels == y]
        if s_y.size == 0 or _class_too_small(s_y.size, alpha):
            continue
        per_label[y] = hard_quantile(s_y, alpha)
    return ConformalThresholds("per_label", alpha, per_label=per_label)


def default_cluster_params(n_classes, alpha):
    """``M = max(1, K // 10)`` clusters and ``min_count = ceil(1 / alpha)``."""
    return max(1, n_classes // 10), int(math.ceil(1.0 / alpha - 1e-9))


def calibrate_cluster(cal_scores, labels, alpha, n_clusters=None, min_count=None,
                      n_classes=None, seed=0):
    """Cluster classes by their score quantiles and share one threshold per cluster.

    Classes with fewer than ``min_count`` calibration samples go to the null
    group, whose threshold is the split-CP threshold over every sample.
    """
    cal_scores = as_1d_float(cal_scores, "cal_scores")
    alpha = check_alpha(alpha)
    labels = check_labels(labels, n_classes, cal_scores.shape[0])
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    default_m, default_min = default_cluster_params(n_classes, alpha)
    n_clusters = default_m if n_clusters is None else int(n_clusters)
    min_count = default_min if min_count is None else int(min_count)
    if n_clusters < 1:
        raise ConfigError("n_clusters must be >= 1")

    counts = np.bincount(labels, minlength=n_classes)
    eligible = np.flatnonzero((counts >= min_count) & (counts > 0))
    cluster_of_label = np.full(n_classes, NULL_CLUSTER, dtype=np.int64)
    null_threshold = hard_quantile(cal_scores, alpha)

    n_eff = min(n_clusters, eligible.size)
    if n_eff == 0:
        return ConformalThresholds(
            "per_cluster", alpha, cluster_of_label=cluster_of_label,
            per_cluster=np.zeros(0), null_threshold=null_threshold,
        )
    if n_eff == 1:
        assignment = np.zeros(eligible.size, dtype=np.int64)
    else:
        embedding = np.stack([
            np.quantile(cal_scores[labels == y], CLUSTER_EMBED_LEVELS) for y in eligible
        ])
        km = KMeans(n_clusters=n_eff, n_init=1, max_iter=50, random_state=seed)
        assignment = km.fit_predict(embedding)
    cluster_of_label[eligible] = assignment

    per_cluster = np.empty(n_eff)
    sample_cluster = cluster_of_label[labels]
    for c in range(n_eff):
        per_cluster[c] = hard_quantile(cal_scores[sample_cluster == c], alpha)
    return ConformalThresholds(
        "per_cluster", alpha, cluster_of_label=cluster_of_label,
        per_cluster=per_cluster, null_threshold=null_threshold,
    )


def predict_sets(scores, thresholds):
    """Boolean membership matrix: ``sets[i, y]`` is True when ``y`` is in the set of ``i``."""
    scores = check_scores(scores)
    if np.isscalar(thresholds):
        per_label = np.full(scores.shape[1], float(thresholds))
    else:
        per_label = thresholds.label_thresholds(scores.shape[1])
    if per_label.shape[0] != scores.shape[1]:
        raise DimensionError("threshold count does not match the score columns")
    return scores <= per_label[None, :]


def as_label_sets(mask):
    """Convert a membership matrix to a list of Python sets."""
    return [set(np.flatnonzero(row).tolist()) for row in np.asarray(mask, dtype=bool)]


def calibrate(cal_true_scores, labels, mode, alpha, n_classes, n_clusters=None,
              min_count=None, seed=0):
    """Dispatch on ``mode`` in ``{"split", "label", "cluster"}``."""
    if mode == "split":
        return calibrate_split(cal_true_scores, alpha)
    if mode == "label":
        return calibrate_label(cal_true_scores, labels, alpha, n_classes)
    if mode == "cluster":
        return calibrate_cluster(cal_true_scores, labels, alpha, n_clusters, min_count,
                                 n_classes, seed)
    raise ConfigError(f"unknown CP mode {mode!r}")
