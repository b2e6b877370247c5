"""Data container, cross-fitting folds, feature scaling and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = [
    "Dataset",
    "FoldAssignment",
    "ScalingParams",
    "CsvSchema",
    "DataError",
    "load_csv",
    "write_csv",
    "make_folds",
    "standardize_features",
    "FeatureStandardizer",
]


class DataError(ValueError):
    """Raised for malformed input data; the message names the offending cell."""


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    outcome: np.ndarray
    treatment: np.ndarray
    true_cate: Optional[np.ndarray] = None
    true_labels: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None
    feature_names: Optional[tuple] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"features must be a non-empty n x p matrix, got shape {X.shape}")
        n, p = X.shape
        y = np.asarray(self.outcome, dtype=np.float64).ravel()
        w = np.asarray(self.treatment, dtype=np.float64).ravel()
        for name, v in (("outcome", y), ("treatment", w)):
            if v.size != n:
                raise DataError(f"{name} has length {v.size}, expected {n}")
        for name, v in (("features", X), ("outcome", y), ("treatment", w)):
            if not np.all(np.isfinite(v)):
                raise DataError(f"{name} contains NaN or infinite values")
        if not np.all((w == 0) | (w == 1)):
            bad = int(np.flatnonzero((w != 0) & (w != 1))[0])
            raise DataError(f"treatment must be 0/1; row {bad} has {w[bad]!r}")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "outcome", _frozen(y))
        object.__setattr__(self, "treatment", _frozen(w.astype(np.int64)))
        if self.true_cate is not None:
            tau = np.asarray(self.true_cate, dtype=np.float64).ravel()
            if tau.size != n:
                raise DataError(f"true_cate has length {tau.size}, expected {n}")
            object.__setattr__(self, "true_cate", _frozen(tau))
        if self.true_labels is not None:
            lab = np.asarray(self.true_labels).ravel()
            if lab.size != n:
                raise DataError(f"true_labels has length {lab.size}, expected {n}")
            object.__setattr__(self, "true_labels", _frozen(lab.astype(np.int64)))
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids).ravel()
        if ids.size != n:
            raise DataError(f"ids has length {ids.size}, expected {n}")
        object.__setattr__(self, "ids", _frozen(ids))
        names = self.feature_names or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} feature names for {p} columns")
        object.__setattr__(self, "feature_names", tuple(names))

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def p(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(
            self.features[idx],
            self.outcome[idx],
            self.treatment[idx],
            None if self.true_cate is None else self.true_cate[idx],
            None if self.true_labels is None else self.true_labels[idx],
            self.ids[idx],
            self.feature_names,
        )


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray
    n_folds: int

    def members(self, s):
        return np.flatnonzero(self.fold_of == s)

    def complement(self, s):
        return np.flatnonzero(self.fold_of != s)

    def sizes(self):
        return np.bincount(self.fold_of, minlength=self.n_folds)


def make_folds(n, n_folds=5, seed=0):
    """Random balanced partition of ``range(n)`` into ``n_folds`` folds."""
    if not 2 <= n_folds <= n / 2:
        raise ValueError(f"fold count {n_folds} out of range [2, {n // 2}] for n={n}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[rng.permutation(n)] = np.arange(n) % n_folds
    return FoldAssignment(_frozen(fold_of), int(n_folds))


@dataclass(frozen=True)
class ScalingParams:
    """Column means and (n - 1) standard deviations.

    Constant columns are stored with mean 0 and sd 1 so they pass through
    unchanged; ``constant`` flags them.
    """

    mean: np.ndarray
    sd: np.ndarray
    constant: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise DataError("standardization needs at least two rows")
        mean = X.mean(axis=0)
        sd = X.std(axis=0, ddof=1)
        constant = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
        mean = np.where(constant, 0.0, mean)
        sd = np.where(constant, 1.0, sd)
        return cls(_frozen(mean), _frozen(sd), _frozen(constant))

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.sd

    def inverse_transform(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.sd + self.mean


def standardize_features(d):
    params = ScalingParams.fit(d.features)
    return replace(d, features=params.transform(d.features)), params


class FeatureStandardizer(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :class:`ScalingParams`."""

    def fit(self, X, y=None):
        X = check_array(X)
        self.scaling_ = ScalingParams.fit(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "scaling_")
        return self.scaling_.transform(check_array(X))

    def inverse_transform(self, Z):
        check_is_fitted(self, "scaling_")
        return self.scaling_.inverse_transform(check_array(Z))


@dataclass(frozen=True)
class CsvSchema:
    """Column names used to read a dataset.

    ``features=None`` takes every column not claimed by another role.
    """

    outcome: str = "y"
    treatment: str = "w"
    features: Optional[Sequence[str]] = None
    id: Optional[str] = "id"
    true_cate: Optional[str] = "true_tau"
    true_labels: Optional[str] = "true_label"

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**d)


def _parse_float(text, row, col):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}, column {col!r}: non-finite value {text!r}")
    return value


def load_csv(path, schema=None):
    """Read a dataset from a headered UTF-8 CSV file.

    Rows are numbered from 1 (the first data row after the header) in error
    messages. Optional truth columns absent from the file leave the matching
    fields empty; the id column defaults to the 0-based row index.
    """
    schema = schema or CsvSchema()
    if isinstance(schema, dict):
        schema = CsvSchema.from_dict(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    col = {name: j for j, name in enumerate(header)}
    for required in (schema.outcome, schema.treatment):
        if required not in col:
            raise DataError(f"{path}: missing column {required!r}")
    claimed = {schema.outcome, schema.treatment, schema.id, schema.true_cate, schema.true_labels}
    if schema.features is None:
        feat_names = [h for h in header if h not in claimed]
    else:
        feat_names = list(schema.features)
        for name in feat_names:
            if name not in col:
                raise DataError(f"{path}: missing feature column {name!r}")
    if not feat_names:
        raise DataError(f"{path}: no feature columns")
    if not rows:
        raise DataError(f"{path}: no data rows")

    n = len(rows)
    X = np.empty((n, len(feat_names)))
    y = np.empty(n)
    w = np.empty(n)
    has_tau = schema.true_cate is not None and schema.true_cate in col
    has_lab = schema.true_labels is not None and schema.true_labels in col
    has_id = schema.id is not None and schema.id in col
    tau = np.empty(n) if has_tau else None
    lab = np.empty(n, dtype=np.int64) if has_lab else None
    ids = [] if has_id else None
    for i, r in enumerate(rows):
        row = i + 1
        if len(r) != len(header):
            raise DataError(f"row {row}: expected {len(header)} fields, found {len(r)}")
        for j, name in enumerate(feat_names):
            X[i, j] = _parse_float(r[col[name]], row, name)
        y[i] = _parse_float(r[col[schema.outcome]], row, schema.outcome)
        wv = _parse_float(r[col[schema.treatment]], row, schema.treatment)
        if wv not in (0.0, 1.0):
            raise DataError(f"row {row}, column {schema.treatment!r}: treatment must be 0 or 1, got {r[col[schema.treatment]]!r}")
        w[i] = wv
        if has_tau:
            tau[i] = _parse_float(r[col[schema.true_cate]], row, schema.true_cate)
        if has_lab:
            v = _parse_float(r[col[schema.true_labels]], row, schema.true_labels)
            if v != int(v):
                raise DataError(f"row {row}, column {schema.true_labels!r}: label must be an integer")
            lab[i] = int(v)
        if has_id:
            ids.append(r[col[schema.id]])
    if has_id:
        ids = np.array(ids)
        try:
            ids = ids.astype(np.int64)
        except ValueError:
            pass
    return Dataset(X, y, w, tau, lab, ids, tuple(feat_names))


def write_csv(d, path):
    """Write ``d`` using the default schema column names."""
    header = ["id", "y", "w", *d.feature_names]
    if d.true_cate is not None:
        header.append("true_tau")
    if d.true_labels is not None:
        header.append("true_label")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(d.n):
            row = [str(d.ids[i]), repr(float(d.outcome[i])), str(int(d.treatment[i]))]
            row += [repr(float(v)) for v in d.features[i]]
            if d.true_cate is not None:
                row.append(repr(float(d.true_cate[i])))
            if d.true_labels is not None:
                row.append(str(int(d.true_labels[i])))
            writer.writerow(row)
