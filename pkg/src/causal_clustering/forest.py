"""Honest regression and causal forests, forest weights and similarity kernels.

Each tree draws a subsample without replacement, splits it into a structure
half (used to choose splits) and an estimation half (used to populate the
leaves). Predictions, weights and kernels are all expressed through the
estimation samples only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import _tree

__all__ = [
    "ForestParams",
    "RegressionForest",
    "CausalForest",
    "WeightMatrix",
    "KernelMatrix",
    "ForestError",
    "fit_regression_forest",
    "predict_regression",
    "fit_causal_forest",
    "predict_tau",
    "forest_weights",
    "kernel_from_weights",
    "rbf_kernel",
    "threshold_kernel",
    "forest_from_dict",
    "FOREST_FORMAT_VERSION",
]

FOREST_FORMAT_VERSION = 1


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    """Tree-ensemble hyperparameters.

    ``mtry=None`` means ``ceil(sqrt(p))`` candidate features per split and
    ``max_depth=None`` means unlimited depth.
    """

    n_trees: int = 500
    sample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    min_leaf_size: int = 5
    max_depth: Optional[int] = None
    mtry: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        for name in ("sample_fraction", "honesty_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.min_leaf_size < 1:
            raise ValueError("min_leaf_size must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be nonnegative")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be positive")

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return ForestParams(**d)

    def estimator_kwargs(self):
        d = asdict(self)
        d["random_state"] = d.pop("seed")
        return d


@dataclass(frozen=True)
class WeightMatrix:
    """Forest weights: ``values[i, j]`` is the weight of training point ``j`` for query ``i``."""

    values: np.ndarray
    n_trees_used: np.ndarray


@dataclass(frozen=True)
class KernelMatrix:
    values: np.ndarray
    provenance: str

    @property
    def shape(self):
        return self.values.shape

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.values)[0])

    def is_symmetric(self, atol=0.0):
        return bool(np.max(np.abs(self.values - self.values.T), initial=0.0) <= atol)


def _tree_seeds(seed, n_trees):
    return np.random.SeedSequence(int(seed)).generate_state(n_trees, dtype=np.uint32).astype(np.int64)


def _canonical_order(X, targets):
    # lexicographic on (x1, ..., xp, targets) so refits on permuted rows agree
    keys = [targets[:, j] for j in range(targets.shape[1] - 1, -1, -1)]
    keys += [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


class _HonestForest(BaseEstimator):
    _mode = None
    _kind = None

    def __init__(
        self,
        n_trees=500,
        sample_fraction=0.5,
        honesty_fraction=0.5,
        min_leaf_size=5,
        max_depth=None,
        mtry=None,
        random_state=0,
    ):
        self.n_trees = n_trees
        self.sample_fraction = sample_fraction
        self.honesty_fraction = honesty_fraction
        self.min_leaf_size = min_leaf_size
        self.max_depth = max_depth
        self.mtry = mtry
        self.random_state = random_state

    @property
    def params(self):
        return ForestParams(
            self.n_trees,
            self.sample_fraction,
            self.honesty_fraction,
            self.min_leaf_size,
            self.max_depth,
            self.mtry,
            self.random_state,
        )

    def _grow(self, X, targets):
        params = self.params
        n, p = X.shape
        if n < 2 * params.min_leaf_size / params.honesty_fraction:
            raise ForestError(
                f"n={n} too small for min_leaf_size={params.min_leaf_size} "
                f"and honesty_fraction={params.honesty_fraction}"
            )
        n_sub = max(2, int(math.floor(n * params.sample_fraction)))
        n_struct = min(max(1, int(math.floor(n_sub * params.honesty_fraction))), n_sub - 1)
        mtry = params.mtry or int(math.ceil(math.sqrt(p)))
        mtry = min(mtry, p)
        max_depth = np.iinfo(np.int64).max if params.max_depth is None else params.max_depth

        order = _canonical_order(X, targets)
        Xc = np.ascontiguousarray(X[order])
        tc = np.ascontiguousarray(targets[order])
        r1 = tc[:, 0].copy()
        r2 = tc[:, 1].copy() if tc.shape[1] > 1 else np.zeros(n)

        parts = [
            _tree.build_tree(Xc, r1, r2, self._mode, n_sub, n_struct, params.min_leaf_size, max_depth, mtry, s)
            for s in _tree_seeds(params.seed, params.n_trees)
        ]
        self._set_arrays(parts)
        self.order_ = order
        self.X_train_ = Xc
        self.targets_ = tc
        self.n_features_in_ = p
        self.n_train_ = n
        return self

    def _set_arrays(self, parts):
        sizes = np.array([len(t[0]) for t in parts])
        tree_ptr = np.concatenate([[0], np.cumsum(sizes)])
        leaf_sizes = np.array([len(t[6]) for t in parts])
        sample_off = np.concatenate([[0], np.cumsum(leaf_sizes)])
        self.tree_ptr_ = tree_ptr.astype(np.int64)
        self.feature_ = np.concatenate([t[0] for t in parts])
        self.threshold_ = np.concatenate([t[1] for t in parts])
        self.left_ = np.concatenate([t[2] for t in parts])
        self.right_ = np.concatenate([t[3] for t in parts])
        self.leaf_start_ = np.concatenate([t[4] + sample_off[b] for b, t in enumerate(parts)])
        self.leaf_count_ = np.concatenate([t[5] for t in parts])
        self.leaf_samples_ = np.concatenate([t[6] for t in parts])
        self.struct_ptr_ = np.concatenate([[0], np.cumsum([len(t[7]) for t in parts])]).astype(np.int64)
        self.struct_samples_ = np.concatenate([t[7] for t in parts])
        self.est_ptr_ = np.concatenate([[0], np.cumsum([len(t[8]) for t in parts])]).astype(np.int64)
        self.est_samples_ = np.concatenate([t[8] for t in parts])

    @property
    def n_trees_fitted(self):
        return len(self.tree_ptr_) - 1

    def _check_X(self, X):
        check_is_fitted(self, "tree_ptr_")
        if self.n_trees_fitted == 0:
            raise ForestError("forest has no trees")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ForestError(f"X has {X.shape[1]} features, forest was trained on {self.n_features_in_}")
        return np.ascontiguousarray(X)

    def apply(self, X):
        """Global leaf index of each row in each tree, shape ``(m, n_trees)``."""
        X = self._check_X(X)
        return _tree.apply_trees(X, self.tree_ptr_, self.feature_, self.threshold_, self.left_, self.right_)

    def _leaf_means(self, X, values):
        leaves = self.apply(X)
        out, used = _tree.leaf_average(leaves, self.leaf_start_, self.leaf_count_, self.leaf_samples_, values)
        empty = np.flatnonzero(used == 0)
        if empty.size:
            raise ForestError(f"no tree has a populated leaf for test row {int(empty[0])}")
        return out

    def forest_weights(self, X):
        """Weights over the training rows in their original (caller's) order."""
        leaves = self.apply(X)
        alpha, used = _tree.weight_matrix(leaves, self.leaf_start_, self.leaf_count_, self.leaf_samples_, self.n_train_)
        empty = np.flatnonzero(used == 0)
        if empty.size:
            raise ForestError(f"no tree has a populated leaf for test row {int(empty[0])}")
        pos = np.empty_like(self.order_)
        pos[self.order_] = np.arange(self.n_train_)
        return WeightMatrix(alpha[:, pos], used)

    def kernel(self, X):
        return kernel_from_weights(self.forest_weights(X))

    def tree_index_sets(self, b):
        """Structure and estimation training indices (caller's order) of tree ``b``."""
        s = self.struct_samples_[self.struct_ptr_[b] : self.struct_ptr_[b + 1]]
        e = self.est_samples_[self.est_ptr_[b] : self.est_ptr_[b + 1]]
        return self.order_[s], self.order_[e]

    def training_indices(self):
        """Every training index used by any tree, in the caller's order."""
        used = np.union1d(self.struct_samples_, self.est_samples_)
        return np.sort(self.order_[used])

    _ARRAYS = (
        "order_", "tree_ptr_", "feature_", "threshold_", "left_", "right_", "leaf_start_",
        "leaf_count_", "leaf_samples_", "struct_ptr_", "struct_samples_", "est_ptr_", "est_samples_",
    )

    def to_dict(self):
        check_is_fitted(self, "tree_ptr_")
        d = {
            "format": "causal_clustering.forest",
            "version": FOREST_FORMAT_VERSION,
            "kind": self._kind,
            "params": asdict(self.params),
            "n_features": self.n_features_in_,
            "X_train": self.X_train_.tolist(),
            "targets": self.targets_.tolist(),
        }
        for name in self._ARRAYS:
            d[name.rstrip("_")] = getattr(self, name).tolist()
        return d

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "causal_clustering.forest" or d.get("version") != FOREST_FORMAT_VERSION:
            raise ForestError("not a version-1 forest document")
        if d.get("kind") != cls._kind:
            raise ForestError(f"document holds a {d.get('kind')} forest, expected {cls._kind}")
        est = cls(**ForestParams(**d["params"]).estimator_kwargs())
        est.n_features_in_ = int(d["n_features"])
        est.X_train_ = np.asarray(d["X_train"], dtype=np.float64).reshape(-1, est.n_features_in_)
        est.targets_ = np.asarray(d["targets"], dtype=np.float64).reshape(est.X_train_.shape[0], -1)
        est.n_train_ = est.X_train_.shape[0]
        for name in cls._ARRAYS:
            dtype = np.float64 if name == "threshold_" else np.int64
            setattr(est, name, np.asarray(d[name.rstrip("_")], dtype=dtype))
        return est


class RegressionForest(RegressorMixin, _HonestForest):
    """Honest regression forest; splits maximise variance reduction."""

    _mode = _tree.REGRESSION
    _kind = "regression"

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.size != X.shape[0]:
            raise ForestError("X and y differ in length")
        if not np.all(np.isfinite(y)):
            raise ForestError("targets contain non-finite values")
        return self._grow(X, y[:, None])

    def predict(self, X):
        return self._leaf_means(X, self.targets_)[:, 0]


class CausalForest(_HonestForest):
    """Honest forest on residualized outcome and treatment.

    Splits maximise the heterogeneity criterion built from node-level
    pseudo-outcomes ``w (y - w tau_P) / mean(w^2)``; predictions solve the
    forest-weighted residual-on-residual least-squares problem.
    """

    _mode = _tree.CAUSAL
    _kind = "causal"

    def fit(self, X, y_res, w_res):
        X = check_array(X, dtype=np.float64)
        y_res = np.asarray(y_res, dtype=np.float64).ravel()
        w_res = np.asarray(w_res, dtype=np.float64).ravel()
        if y_res.size != X.shape[0] or w_res.size != X.shape[0]:
            raise ForestError("X, y_res and w_res differ in length")
        if not (np.all(np.isfinite(y_res)) and np.all(np.isfinite(w_res))):
            raise ForestError("residuals contain non-finite values")
        if np.var(w_res) <= 1e-8 and np.mean(w_res**2) <= 1e-8:
            raise ForestError("treatment residuals are identically zero; no overlap to estimate effects")
        return self._grow(X, np.column_stack([y_res, w_res]))

    @property
    def y_res_(self):
        return self.targets_[:, 0]

    @property
    def w_res_(self):
        return self.targets_[:, 1]

    def predict(self, X):
        y, w = self.targets_[:, 0], self.targets_[:, 1]
        sums = self._leaf_means(X, np.column_stack([w * y, w * w]))
        return _solve_tau(sums[:, 0], sums[:, 1])


def _solve_tau(num, den):
    bad = np.flatnonzero(~(den > 1e-10))
    if bad.size:
        raise ForestError(f"degenerate weighted treatment variance at test row {int(bad[0])}")
    return num / den


def forest_from_dict(d):
    kinds = {"regression": RegressionForest, "causal": CausalForest}
    if d.get("kind") not in kinds:
        raise ForestError(f"unknown forest kind {d.get('kind')!r}")
    return kinds[d["kind"]].from_dict(d)


def fit_regression_forest(X, targets, params=None):
    params = params or ForestParams()
    return RegressionForest(**params.estimator_kwargs()).fit(X, targets)


def predict_regression(f, X):
    return f.predict(X)


def fit_causal_forest(X, y_res, w_res, params=None):
    params = params or ForestParams()
    return CausalForest(**params.estimator_kwargs()).fit(X, y_res, w_res)


def predict_tau(f, X):
    return f.predict(X)


def forest_weights(f, X):
    return f.forest_weights(X)


def tau_from_weights(a, y_res, w_res):
    """Closed-form weighted least squares: sum(a w y) / sum(a w^2)."""
    A = a.values if isinstance(a, WeightMatrix) else np.asarray(a)
    return _solve_tau(A @ (w_res * y_res), A @ (w_res * w_res))


def kernel_from_weights(a):
    """Outer-product kernel ``alpha @ alpha.T``, exactly symmetrized."""
    A = a.values if isinstance(a, WeightMatrix) else np.asarray(a, dtype=np.float64)
    K = A @ A.T
    K = 0.5 * (K + K.T)
    return KernelMatrix(K, "forest")


def _pairwise_sq_dists(X):
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return 0.5 * (d2 + d2.T)


def rbf_kernel(X, bandwidth="auto"):
    """Gaussian kernel ``exp(-|x - x'|^2 / (2 h^2))``.

    ``bandwidth="auto"`` uses ``h = median pairwise distance / sqrt(2)`` so the
    median pair gets similarity ``exp(-1)``.
    """
    X = check_array(X, dtype=np.float64)
    d2 = _pairwise_sq_dists(X)
    if isinstance(bandwidth, str):
        if bandwidth != "auto":
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        iu = np.triu_indices(X.shape[0], 1)
        med = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 0.0
        h = med / math.sqrt(2.0) if med > 0 else 1.0
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    if math.isinf(h):
        K = np.ones_like(d2)
    else:
        K = np.exp(-d2 / (2.0 * h * h))
    np.fill_diagonal(K, 1.0)
    return KernelMatrix(K, "rbf")


def threshold_kernel(K, percentile=90.0):
    """Binarize a kernel, keeping the top ``(100 - percentile)%`` of pairs.

    The number of pairs kept is ``round((1 - percentile / 100) * n_pairs)``;
    pairs tied with the smallest kept value are kept as well. The diagonal is
    set to 1. The result need not be positive semi-definite.
    """
    values = K.values if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)
    if not 0.0 <= percentile <= 100.0:
        raise ValueError("percentile must lie in [0, 100]")
    m = values.shape[0]
    iu = np.triu_indices(m, 1)
    pairs = values[iu]
    keep = int(math.floor((1.0 - percentile / 100.0) * pairs.size + 0.5))
    out = np.eye(m)
    if keep > 0:
        cutoff = np.sort(pairs)[::-1][keep - 1]
        on = pairs >= cutoff
        out[iu[0][on], iu[1][on]] = 1.0
        out[iu[1][on], iu[0][on]] = 1.0
    return KernelMatrix(out, "thresholded")
