"""Estimation and partition-agreement metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

__all__ = [
    "MetricsReport",
    "pehe",
    "excess_risk",
    "within_var",
    "between_var",
    "rand_index",
    "adjusted_rand",
    "nmi",
    "contingency",
    "expand_cluster_means",
]


def _vec(x, name):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError(f"{name} is empty")
    return x


def _codes(labels):
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        raise ValueError("labels are empty")
    _, codes = np.unique(labels, return_inverse=True)
    return codes


def contingency(a, b):
    """Contingency table of two labelings (rows: clusters of ``a``)."""
    a, b = _codes(a), _codes(b)
    if a.shape != b.shape:
        raise ValueError(f"label lengths differ: {a.size} vs {b.size}")
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return int(np.sum(x * (x - 1) // 2))


def _same_partition(table):
    return bool(np.all((table > 0).sum(axis=0) == 1) and np.all((table > 0).sum(axis=1) == 1))


def pehe(tau_cluster, tau_true):
    """Root mean squared error between predicted and true effects."""
    est, true = _vec(tau_cluster, "tau_cluster"), _vec(tau_true, "tau_true")
    if est.shape != true.shape:
        raise ValueError(f"length mismatch: {est.size} vs {true.size}")
    return float(np.sqrt(np.mean((est - true) ** 2)))


def excess_risk(pehe_hat, pehe_star):
    """PEHE penalty of a clustered estimate over its base learner (can be negative)."""
    if pehe_hat < 0 or pehe_star < 0:
        raise ValueError("PEHE values must be nonnegative")
    return float(pehe_hat) - float(pehe_star)


def expand_cluster_means(tau, labels):
    """Replace every entry of ``tau`` by the mean of its cluster."""
    tau = _vec(tau, "tau")
    codes = _codes(labels)
    if codes.shape != tau.shape:
        raise ValueError("labels and tau differ in length")
    means = np.bincount(codes, weights=tau) / np.bincount(codes)
    return means[codes]


def within_var(tau_hat, labels):
    tau = _vec(tau_hat, "tau_hat")
    return float(np.mean((tau - expand_cluster_means(tau, labels)) ** 2))


def between_var(tau_hat, labels):
    tau = _vec(tau_hat, "tau_hat")
    return float(np.mean((expand_cluster_means(tau, labels) - tau.mean()) ** 2))


def rand_index(a, b):
    table = contingency(a, b)
    n = int(table.sum())
    if n < 2:
        raise ValueError("rand index needs at least two samples")
    total = n * (n - 1) // 2
    same_both = _comb2(table)
    diff_both = total - _comb2(table.sum(axis=1)) - _comb2(table.sum(axis=0)) + same_both
    return (same_both + diff_both) / total


def adjusted_rand(a, b):
    """Hubert-Arabie adjusted Rand index.

    When the chance-corrected denominator vanishes (both labelings all-one or
    all-singletons) the result is 1.0 for identical partitions and 0.0 otherwise.
    """
    table = contingency(a, b)
    n = int(table.sum())
    if n < 2:
        raise ValueError("adjusted rand index needs at least two samples")
    total = n * (n - 1) // 2
    index = _comb2(table)
    sum_a = _comb2(table.sum(axis=1))
    sum_b = _comb2(table.sum(axis=0))
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        return 1.0 if _same_partition(table) else 0.0
    return (index - expected) / (max_index - expected)


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(a, b):
    """Mutual information normalised by the geometric mean of the entropies."""
    table = contingency(a, b)
    n = float(table.sum())
    h_a = _entropy(table.sum(axis=1), n)
    h_b = _entropy(table.sum(axis=0), n)
    if h_a == 0.0 or h_b == 0.0:
        return 1.0 if _same_partition(table) else 0.0
    nz = table > 0
    joint = table[nz] / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))[nz] / (n * n)
    mi = float(np.sum(joint * np.log(joint / outer)))
    return min(max(mi / math.sqrt(h_a * h_b), 0.0), 1.0)


@dataclass
class MetricsReport:
    n: int
    k: int
    pehe: Optional[float] = None
    pehe_base: Optional[float] = None
    excess_risk: Optional[float] = None
    v_within: Optional[float] = None
    v_out: Optional[float] = None
    ari: Optional[float] = None
    ri: Optional[float] = None
    nmi: Optional[float] = None

    @classmethod
    def compute(cls, tau_hat, labels, tau_true=None, true_labels=None):
        """Build a report from cluster labels and (optional) ground truth."""
        tau_hat = _vec(tau_hat, "tau_hat")
        labels = np.asarray(labels)
        rep = cls(n=tau_hat.size, k=int(np.unique(labels).size))
        rep.v_within = within_var(tau_hat, labels)
        rep.v_out = between_var(tau_hat, labels)
        if tau_true is not None:
            rep.pehe = pehe(expand_cluster_means(tau_hat, labels), tau_true)
            rep.pehe_base = pehe(tau_hat, tau_true)
            rep.excess_risk = excess_risk(rep.pehe, rep.pehe_base)
        if true_labels is not None:
            rep.ari = adjusted_rand(labels, true_labels)
            rep.ri = rand_index(labels, true_labels)
            rep.nmi = nmi(labels, true_labels)
        return rep

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_header(self):
        return [f.name for f in fields(self)]

    def to_csv_row(self, header=True):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(self.csv_header())
        writer.writerow(["" if v is None else repr(v) for v in self.to_dict().values()])
        return buf.getvalue()
