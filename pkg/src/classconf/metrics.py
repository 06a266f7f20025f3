"""Coverage, set size, coverage gap and top-k accuracy."""

import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List

import numpy as np

from ._validation import check_alpha, check_labels
from .exceptions import DimensionError
from .scores import descending_ranks


@dataclass
class ClassBreakdown:
    label: int
    coverage: float
    avg_size: float
    count: int


@dataclass
class EvalReport:
    """Metrics of one set of predictions. ``cov_gap`` is in percentage points."""

    alpha: float
    coverage: float
    avg_size: float
    cov_gap: float
    per_class: List[ClassBreakdown] = field(default_factory=list)
    topk: Dict[int, float] = field(default_factory=dict)

    def to_dict(self):
        out = asdict(self)
        out["topk"] = {str(k): v for k, v in self.topk.items()}
        return out


def _as_mask(sets, n_classes):
    if isinstance(sets, np.ndarray) and sets.dtype == bool:
        return sets
    mask = np.zeros((len(sets), n_classes), dtype=bool)
    for i, s in enumerate(sets):
        for y in s:
            mask[i, int(y)] = True
    return mask


def topk_accuracy(probs, labels, k):
    """Fraction of rows whose label is among the ``k`` most probable ones (ties to lower index)."""
    ranks = descending_ranks(probs)
    labels = np.asarray(labels, dtype=np.int64)
    return float(np.mean(ranks[np.arange(labels.shape[0]), labels] < k))


def evaluate(sets, labels, probs=None, alpha=0.1, ks=(1, 3), n_classes=None):
    """Marginal coverage, mean set size, coverage gap and top-k accuracy.

    ``sets`` is a boolean ``(n, K)`` membership matrix or a sequence of label
    collections. Classes absent from ``labels`` are left out of the coverage
    gap.
    """
    alpha = check_alpha(alpha)
    if n_classes is None:
        if probs is not None:
            n_classes = np.asarray(probs).shape[1]
        elif isinstance(sets, np.ndarray) and sets.ndim == 2:
            n_classes = sets.shape[1]
        else:
            n_classes = 1 + max(
                [int(np.max(labels))] + [max(s) for s in sets if len(s)]
            )
    mask = _as_mask(sets, n_classes)
    labels = check_labels(labels, n_classes, mask.shape[0])
    if mask.shape[0] == 0:
        raise DimensionError("nothing to evaluate")
    n = labels.shape[0]
    covered = mask[np.arange(n), labels]
    sizes = mask.sum(axis=1)

    per_class, gaps = [], []
    missing = []
    for y in range(n_classes):
        members = labels == y
        if not members.any():
            missing.append(y)
            continue
        c_y = float(covered[members].mean())
        per_class.append(ClassBreakdown(y, c_y, float(sizes[members].mean()), int(members.sum())))
        gaps.append(abs(c_y - (1.0 - alpha)))
    if missing:
        warnings.warn(f"classes {missing} absent from the labels; left out of cov_gap",
                      RuntimeWarning, stacklevel=2)

    topk = {}
    if probs is not None:
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != mask.shape:
            raise DimensionError("probs must have the shape of the set matrix")
        topk = {int(k): topk_accuracy(probs, labels, int(k)) for k in ks}

    return EvalReport(
        alpha=alpha,
        coverage=float(covered.mean()),
        avg_size=float(sizes.mean()),
        cov_gap=100.0 * float(np.mean(gaps)),
        per_class=per_class,
        topk=topk,
    )


def summarize(reports):
    """Mean and standard deviation of the scalar metrics over repeated resamples."""
    keys = ["coverage", "avg_size", "cov_gap"]
    out = {}
    for key in keys:
        values = np.array([getattr(r, key) for r in reports])
        out[key] = float(values.mean())
        out[key + "_sd"] = float(values.std(ddof=1)) if values.size > 1 else 0.0
    for k in reports[0].topk if reports else []:
        values = np.array([r.topk[k] for r in reports])
        out[f"top{k}"] = float(values.mean())
        out[f"top{k}_sd"] = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return out
