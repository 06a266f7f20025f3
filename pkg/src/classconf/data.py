"""Synthetic long-tailed Gaussian mixtures, CSV ingestion and the split protocol."""

import csv
import json
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import DimensionError, DomainError, ParseError, PreconditionError, SchemaError


@dataclass
class LabeledDataset:
    """Features, integer labels in ``0..K-1`` and the per-class index lists."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    label_names: Optional[list] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DimensionError("features must be a 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionError("labels must align with the feature rows")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DomainError("labels out of range")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)

    @property
    def class_index(self):
        return [np.flatnonzero(self.labels == y) for y in range(self.n_classes)]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices],
                              self.n_classes, self.label_names)


@dataclass(frozen=True)
class ImbalanceSpec:
    """Exponential class-count profile ``n_y = base * gamma ** (y / (K - 1))``."""

    gamma: float = 1.0
    base_count: int = 500

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in (0, 1], got {self.gamma}")
        if int(self.base_count) < 1:
            raise DomainError("base_count must be positive")

    def counts(self, n_classes):
        if n_classes == 1:
            return np.array([int(self.base_count)])
        y = np.arange(n_classes)
        raw = self.base_count * self.gamma ** (y / (n_classes - 1))
        return np.maximum(1, np.floor(raw + 0.5)).astype(np.int64)


def make_class_means(n_classes, n_features, class_separation, seed):
    """Class centres whose pairwise distances are all at least ``class_separation``.

    With ``K <= d`` the centres are scaled rows of a random orthogonal matrix
    (every pair exactly ``class_separation`` apart). Otherwise they are spread
    over a sphere by farthest-point sampling and rescaled to the minimum gap.
    """
    if n_classes < 2 or n_features < 2:
        raise PreconditionError("need K >= 2 and d >= 2")
    rng = np.random.default_rng(seed)
    if n_classes <= n_features:
        q, _ = np.linalg.qr(rng.normal(size=(n_features, n_features)))
        return q[:n_classes] * (class_separation / math.sqrt(2.0))
    candidates = rng.normal(size=(50 * n_classes, n_features))
    candidates /= np.linalg.norm(candidates, axis=1, keepdims=True)
    chosen = [0]
    dist = np.linalg.norm(candidates - candidates[0], axis=1)
    for _ in range(n_classes - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(candidates - candidates[nxt], axis=1))
    means = candidates[chosen]
    gaps = np.linalg.norm(means[:, None] - means[None, :], axis=2)
    min_gap = gaps[~np.eye(n_classes, dtype=bool)].min()
    return means * (class_separation / min_gap)


def sample_mixture(means, counts, rng):
    """Draw ``counts[y]`` points from ``N(means[y], I)`` for every class."""
    features = [rng.normal(size=(int(c), means.shape[1])) + means[y]
                for y, c in enumerate(counts)]
    labels = np.repeat(np.arange(len(counts)), counts)
    perm = rng.permutation(labels.shape[0])
    return LabeledDataset(np.vstack(features)[perm], labels[perm], len(counts))


def generate_gaussian_mixture(n_classes, n_features, spec, class_separation=2.0, seed=0):
    """Long-tailed Gaussian mixture with identity covariance, deterministic in ``seed``."""
    if not isinstance(spec, ImbalanceSpec):
        raise DomainError("spec must be an ImbalanceSpec")
    means = make_class_means(n_classes, n_features, class_separation, seed)
    rng = np.random.default_rng([seed, 1])
    return sample_mixture(means, spec.counts(n_classes), rng)


def generate_benchmark(n_classes, n_features, gamma, base_count, pool_per_class,
                       class_separation=2.0, seed=0):
    """Long-tailed training set plus a balanced evaluation pool with shared centres.

    The pool depends only on ``seed`` (not on ``gamma``), so sweeping the
    imbalance leaves calibration and test data unchanged.
    """
    means = make_class_means(n_classes, n_features, class_separation, seed)
    train = sample_mixture(means, ImbalanceSpec(gamma, base_count).counts(n_classes),
                           np.random.default_rng([seed, 1, int(round(gamma * 1e6))]))
    pool = sample_mixture(means, np.full(n_classes, int(pool_per_class)),
                          np.random.default_rng([seed, 2]))
    return train, pool


def split_protocol(pool, seed):
    """Split an evaluation pool into ``(val, cal, test)``.

    Per class: half (rounded up) goes to test, the rest is divided 20:80 into
    validation and calibration. A class with a single sample goes wholly to
    test.
    """
    if len(pool) < 10:
        raise PreconditionError("the pool needs at least 10 examples")
    rng = np.random.default_rng(seed)
    val, cal, test = [], [], []
    for y, idx in enumerate(pool.class_index):
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        if idx.size == 1:
            warnings.warn(f"class {y} has a single pool sample; assigned to test",
                          RuntimeWarning, stacklevel=2)
            test.append(idx)
            continue
        n_test = int(math.ceil(idx.size / 2))
        rest = idx.size - n_test
        n_val = int(math.floor(0.2 * rest + 0.5))
        test.append(idx[:n_test])
        val.append(idx[n_test:n_test + n_val])
        cal.append(idx[n_test + n_val:])

    def take(parts):
        if not parts:
            return pool.subset(np.zeros(0, dtype=np.int64))
        return pool.subset(np.sort(np.concatenate(parts)))

    return take(val), take(cal), take(test)


def load_csv(path, label_column, feature_columns=None, label_names=None):
    """Read a headed CSV into a dataset.

    Labels are remapped to ``0..K-1`` in order of first appearance; the
    original values are kept in ``label_names``. Pass the ``label_names`` of a
    previously loaded split to reuse its mapping (new labels are appended).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", row=1) from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise SchemaError(f"missing label column {label_column!r}")
        if feature_columns is None:
            feature_columns = [h for h in header if h != label_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise SchemaError(f"missing feature columns {missing}")
        label_pos = header.index(label_column)
        feat_pos = [header.index(c) for c in feature_columns]

        names = list(label_names) if label_names is not None else []
        remap = {key: i for i, key in enumerate(names)}
        features, labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=row_no)
            raw_label = row[label_pos].strip()
            try:
                key = int(raw_label)
            except ValueError:
                raise ParseError(f"label {raw_label!r} is not an integer", row=row_no) from None
            if key not in remap:
                remap[key] = len(names)
                names.append(key)
            try:
                features.append([float(row[p]) for p in feat_pos])
            except ValueError:
                raise ParseError("non-numeric feature value", row=row_no) from None
            labels.append(remap[key])
    features = np.asarray(features, dtype=np.float64).reshape(len(labels), len(feat_pos))
    return LabeledDataset(features, np.asarray(labels, dtype=np.int64), len(names), names)


def write_csv(dataset, path, label_column="label", feature_columns=None):
    d = dataset.features.shape[1]
    if feature_columns is None:
        feature_columns = [f"x{j}" for j in range(d)]
    names = dataset.label_names
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*feature_columns, label_column])
        for x, y in zip(dataset.features, dataset.labels):
            label = names[y] if names is not None else int(y)
            writer.writerow([repr(float(v)) for v in x] + [label])


def manifest(splits, seeds, gamma):
    """JSON-ready summary: per-class counts for every split, seeds and gamma."""
    return {
        "gamma": gamma,
        "seeds": seeds,
        "splits": {name: {"size": len(ds), "class_counts": ds.class_counts.tolist()}
                   for name, ds in splits.items()},
    }


def write_manifest(splits, seeds, gamma, path):
    with open(path, "w") as fh:
        json.dump(manifest(splits, seeds, gamma), fh, indent=2, sort_keys=True)
