"""Tabular datasets: CSV ingest, seeded splits and folds, standardization,
label randomization, and a Gaussian-mixture generator.

All randomness goes through ``numpy.random.Generator`` backed by PCG64
(``numpy.random.default_rng``), whose stream is fixed across platforms for
a given seed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

# fractions of the 870,000-jet benchmark: 472,500 / 157,500 / 240,000
JET_FRACTIONS = (472_500 / 870_000, 157_500 / 870_000, 240_000 / 870_000)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def rng_for(seed):
    return np.random.default_rng(seed)


def round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    feature_names: tuple | None = None

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if f.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if f.shape[0] == 0:
            raise DataError("no samples")
        if y.shape != (f.shape[0],):
            raise DataError(f"expected {f.shape[0]} labels, got shape {y.shape}")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        f.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_features(self):
        return self.features.shape[1]

    def subset(self, idx):
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.feature_names)

    def with_labels(self, labels):
        return Dataset(self.features, labels, self.num_classes, self.feature_names)

    def with_features(self, features):
        return Dataset(features, self.labels, self.num_classes, self.feature_names)


def concat(parts):
    first = parts[0]
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        first.num_classes,
        first.feature_names,
    )


def _is_number(tok):
    try:
        float(tok)
    except ValueError:
        return False
    return True


def load_csv(path, num_classes):
    """Read ``features..., label`` rows.

    The first row is a header when none of its fields parse as numbers.
    Row numbers in error messages are 1-based physical line numbers.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i, r) for i, r in enumerate(csv.reader(fh), start=1) if r and any(t.strip() for t in r)]
    names = None
    if rows and not any(_is_number(t) for t in rows[0][1]):
        names = tuple(t.strip() for t in rows[0][1][:-1])
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no samples")
    width = len(rows[0][1])
    if width < 2:
        raise DataError(f"{path}: row {rows[0][0]}: need at least one feature and a label")
    feats = np.empty((len(rows), width - 1))
    labels = np.empty(len(rows), dtype=np.int64)
    for k, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {lineno}: expected {width} columns, got {len(row)}")
        for j, tok in enumerate(row[:-1]):
            try:
                feats[k, j] = float(tok)
            except ValueError:
                raise DataError(f"{path}: row {lineno}: non-numeric feature {tok.strip()!r} in column {j + 1}") from None
        tok = row[-1].strip()
        try:
            lab = int(tok)
        except ValueError:
            raise DataError(f"{path}: row {lineno}: label {tok!r} is not an integer") from None
        if not 0 <= lab < num_classes:
            raise DataError(f"{path}: row {lineno}: label {lab} out of range [0, {num_classes})")
        labels[k] = lab
    if names is not None and len(names) != width - 1:
        names = None
    return Dataset(feats, labels, num_classes, names)


def save_csv(d, path, header=False):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            names = d.feature_names or tuple(f"f{j}" for j in range(d.num_features))
            w.writerow([*names, "label"])
        for x, y in zip(d.features, d.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = JET_FRACTIONS[0]
    val_fraction: float = JET_FRACTIONS[1]
    test_fraction: float = JET_FRACTIONS[2]
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fr) <= 0:
            raise DataError("split fractions must be positive")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {sum(fr)!r}")


def split(d, spec):
    """Shuffle and cut into (train, val, test).

    Val and test get ``floor(fraction * N)`` samples; train gets the rest.
    """
    n = len(d)
    n_val = math.floor(spec.val_fraction * n)
    n_test = math.floor(spec.test_fraction * n)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise DataError(f"empty split: sizes ({n_train}, {n_val}, {n_test}) from {n} samples")
    perm = rng_for(spec.seed).permutation(n)
    return (
        d.subset(perm[:n_train]),
        d.subset(perm[n_train : n_train + n_val]),
        d.subset(perm[n_train + n_val :]),
    )


def kfold(pool, k, seed):
    """k (train, val) pairs; fold i validates on partition i."""
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    if len(pool) < k:
        raise DataError(f"need at least {k} samples for {k} folds, got {len(pool)}")
    perm = rng_for(seed).permutation(len(pool))
    parts = np.array_split(perm, k)
    folds = []
    for i in range(k):
        train_idx = np.concatenate([p for j, p in enumerate(parts) if j != i])
        folds.append((pool.subset(train_idx), pool.subset(parts[i])))
    return folds


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, d):
        return d.with_features(self.transform(d.features))

    def transform(self, x):
        safe = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (x - self.mean) / safe, 0.0)

    def inverse(self, z):
        return z * self.std + self.mean

    @classmethod
    def identity(cls, num_features):
        return cls(np.zeros(num_features), np.ones(num_features))


def fit_standardizer(train):
    """Population mean/std per feature; constant features map to 0."""
    x = train.features
    return Standardizer(x.mean(axis=0), x.std(axis=0))


def randomize_labels(d, fraction, seed):
    """Redraw the labels of exactly ``round(fraction * N)`` seeded samples.

    Each selected label is drawn uniformly from all classes, so it may come
    back unchanged.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"fraction must be in [0, 1], got {fraction}")
    count = round_half_up(fraction * len(d))
    if count == 0:
        return d
    rng = rng_for(seed)
    idx = rng.choice(len(d), size=count, replace=False)
    labels = d.labels.copy()
    labels[idx] = rng.integers(0, d.num_classes, size=count)
    return d.with_labels(labels)


def synth_generate(num_samples, num_features, num_classes, class_separation, seed):
    """Balanced Gaussian mixture with unit covariance.

    Class means sit at distance ``class_separation`` from one another: an
    orthonormal frame scaled by ``separation / sqrt(2)`` when there are no
    more classes than features, otherwise random directions on a sphere of
    radius ``separation / 2``.
    """
    if min(num_samples, num_features, num_classes) < 1:
        raise DataError("all counts must be positive")
    rng = rng_for(seed)
    if num_classes <= num_features:
        q, _ = np.linalg.qr(rng.standard_normal((num_features, num_classes)))
        means = q.T * (class_separation / math.sqrt(2.0))
    else:
        dirs = rng.standard_normal((num_classes, num_features))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        means = dirs * (class_separation / 2.0)
    labels = rng.permutation(np.arange(num_samples) % num_classes)
    feats = means[labels] + rng.standard_normal((num_samples, num_features))
    return Dataset(feats, labels, num_classes)
