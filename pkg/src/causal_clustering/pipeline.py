"""Cross-fitted residual-on-residual CATE estimation and the cross-fitted kernel."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import Dataset, FoldAssignment, make_folds
from .forest import (
    CausalForest,
    ForestParams,
    KernelMatrix,
    RegressionForest,
    kernel_from_weights,
)

__all__ = [
    "NuisanceEstimates",
    "Residuals",
    "CrossfitResult",
    "estimate_nuisances",
    "residualize",
    "crossfit_cate",
    "crossfit_kernel",
    "check_honesty",
    "CrossFitCATE",
    "BUNDLE_FORMAT_VERSION",
]

BUNDLE_FORMAT_VERSION = 1

_ROLE_OUTCOME, _ROLE_PROPENSITY, _ROLE_EFFECT = 0, 1, 2


def _role_seed(seed, fold, role):
    return int(np.random.SeedSequence([int(seed), int(fold), int(role)]).generate_state(1)[0])


@dataclass(frozen=True)
class NuisanceEstimates:
    m_hat: np.ndarray
    e_hat: np.ndarray
    clip: float


@dataclass(frozen=True)
class Residuals:
    y_tilde: np.ndarray
    w_tilde: np.ndarray


@dataclass
class CrossfitResult:
    folds: FoldAssignment
    forests: list
    train_indices: list
    nuisances: NuisanceEstimates
    residuals: Residuals
    tau_hf: np.ndarray
    X: np.ndarray
    params: ForestParams
    nuisance_params: ForestParams
    _kernel: Optional[KernelMatrix] = field(default=None, repr=False)

    @property
    def kernel_hf(self):
        if self._kernel is None:
            self._kernel = crossfit_kernel(self)
        return self._kernel

    def predict(self, X):
        """Effect estimates for unseen points: mean over the fold forests."""
        return np.mean([f.predict(X) for f in self.forests], axis=0)

    def to_dict(self):
        return {
            "format": "causal_clustering.crossfit",
            "version": BUNDLE_FORMAT_VERSION,
            "n_folds": self.folds.n_folds,
            "fold_of": self.folds.fold_of.tolist(),
            "params": asdict(self.params),
            "nuisance_params": asdict(self.nuisance_params),
            "clip": self.nuisances.clip,
            "m_hat": self.nuisances.m_hat.tolist(),
            "e_hat": self.nuisances.e_hat.tolist(),
            "y_tilde": self.residuals.y_tilde.tolist(),
            "w_tilde": self.residuals.w_tilde.tolist(),
            "tau_hf": self.tau_hf.tolist(),
            "X": self.X.tolist(),
            "train_indices": [t.tolist() for t in self.train_indices],
            "forests": [f.to_dict() for f in self.forests],
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "causal_clustering.crossfit" or d.get("version") != BUNDLE_FORMAT_VERSION:
            raise ValueError("not a version-1 cross-fit bundle")
        folds = FoldAssignment(np.asarray(d["fold_of"], dtype=np.int64), int(d["n_folds"]))
        X = np.asarray(d["X"], dtype=np.float64)
        return cls(
            folds=folds,
            forests=[CausalForest.from_dict(f) for f in d["forests"]],
            train_indices=[np.asarray(t, dtype=np.int64) for t in d["train_indices"]],
            nuisances=NuisanceEstimates(np.asarray(d["m_hat"]), np.asarray(d["e_hat"]), float(d["clip"])),
            residuals=Residuals(np.asarray(d["y_tilde"]), np.asarray(d["w_tilde"])),
            tau_hf=np.asarray(d["tau_hf"]),
            X=X.reshape(len(folds.fold_of), -1),
            params=ForestParams(**d["params"]),
            nuisance_params=ForestParams(**d["nuisance_params"]),
        )


def _check_folds(folds, n, params):
    if folds.fold_of.shape[0] != n:
        raise ValueError(f"fold assignment covers {folds.fold_of.shape[0]} rows, dataset has {n}")
    minimum = 2 * params.min_leaf_size / params.honesty_fraction
    for s in range(folds.n_folds):
        m = int(np.sum(folds.fold_of != s))
        if m < minimum:
            raise ValueError(f"fold {s}: complement has {m} rows, forests need at least {minimum:g}")


def _check_out_of_fold(used, held_out, s):
    leaked = np.intersect1d(used, held_out)
    if leaked.size:
        raise AssertionError(f"fold-{s} forest was trained on {leaked.size} rows of fold {s}")


def check_honesty(r):
    """Raise ``AssertionError`` if any fold forest used a row of its own fold."""
    for s, (forest, train) in enumerate(zip(r.forests, r.train_indices)):
        _check_out_of_fold(train[forest.training_indices()], r.folds.members(s), s)


def estimate_nuisances(d, folds, params=None, clip=0.01):
    """Out-of-fold outcome means and clipped propensities."""
    params = params or ForestParams()
    if not 0.0 <= clip < 0.5:
        raise ValueError("clip must lie in [0, 0.5)")
    _check_folds(folds, d.n, params)
    m_hat = np.empty(d.n)
    e_hat = np.empty(d.n)
    for s in range(folds.n_folds):
        train, test = folds.complement(s), folds.members(s)
        kw = params.estimator_kwargs()
        kw["random_state"] = _role_seed(params.seed, s, _ROLE_OUTCOME)
        m_hat[test] = RegressionForest(**kw).fit(d.features[train], d.outcome[train]).predict(d.features[test])
        kw["random_state"] = _role_seed(params.seed, s, _ROLE_PROPENSITY)
        e_hat[test] = RegressionForest(**kw).fit(d.features[train], d.treatment[train]).predict(d.features[test])
    return NuisanceEstimates(m_hat, np.clip(e_hat, clip, 1.0 - clip), float(clip))


def residualize(d, nz):
    if nz.m_hat.shape[0] != d.n or nz.e_hat.shape[0] != d.n:
        raise ValueError("nuisance estimates and dataset differ in length")
    return Residuals(d.outcome - nz.m_hat, d.treatment - nz.e_hat)


def crossfit_cate(d, folds=None, params=None, clip=0.01, nuisance_params=None, n_folds=5):
    """Step 1: residualize out of fold, fit one causal forest per fold complement.

    ``tau_hf[i]`` comes from the forest that never saw the fold of ``i``.
    """
    params = params or ForestParams()
    nuisance_params = nuisance_params or params
    if folds is None:
        folds = make_folds(d.n, n_folds, params.seed)
    _check_folds(folds, d.n, params)
    nz = estimate_nuisances(d, folds, nuisance_params, clip)
    res = residualize(d, nz)
    tau = np.empty(d.n)
    forests, train_sets = [], []
    for s in range(folds.n_folds):
        train, test = folds.complement(s), folds.members(s)
        kw = params.estimator_kwargs()
        kw["random_state"] = _role_seed(params.seed, s, _ROLE_EFFECT)
        cf = CausalForest(**kw).fit(d.features[train], res.y_tilde[train], res.w_tilde[train])
        _check_out_of_fold(train[cf.training_indices()], test, s)
        tau[test] = cf.predict(d.features[test])
        forests.append(cf)
        train_sets.append(train)
    return CrossfitResult(folds, forests, train_sets, nz, res, tau, np.array(d.features), params, nuisance_params)


def crossfit_kernel(r, X_eval="training"):
    """Cross-fitted forest kernel.

    For training points in folds ``s1`` and ``s2`` the entry is the average of
    the two fold-excluded forest kernels. Unseen points belong to no fold, so
    their kernel is the average over all fold forests.
    """
    if isinstance(X_eval, str):
        if X_eval != "training":
            raise ValueError(f"unknown evaluation set {X_eval!r}")
        X, fold_of = r.X, r.folds.fold_of
        n = X.shape[0]
        half = np.empty((n, n))
        for s, forest in enumerate(r.forests):
            rows = np.flatnonzero(fold_of == s)
            alpha = forest.forest_weights(X).values
            half[rows] = alpha[rows] @ alpha.T
        K = 0.5 * (half + half.T)
        return KernelMatrix(K, "crossfit-averaged")
    X = check_array(X_eval, dtype=np.float64)
    K = np.zeros((X.shape[0], X.shape[0]))
    for forest in r.forests:
        K += kernel_from_weights(forest.forest_weights(X)).values
    return KernelMatrix(K / len(r.forests), "crossfit-averaged")


class CrossFitCATE(BaseEstimator):
    """Estimator facade over :func:`crossfit_cate`.

    After ``fit(X, y, w)``: ``tau_hf_`` holds out-of-fold effects and
    ``result_`` the full :class:`CrossfitResult`.
    """

    def __init__(
        self,
        n_folds=5,
        clip=0.01,
        n_trees=500,
        sample_fraction=0.5,
        honesty_fraction=0.5,
        min_leaf_size=5,
        max_depth=None,
        mtry=None,
        nuisance_params=None,
        random_state=0,
    ):
        self.n_folds = n_folds
        self.clip = clip
        self.n_trees = n_trees
        self.sample_fraction = sample_fraction
        self.honesty_fraction = honesty_fraction
        self.min_leaf_size = min_leaf_size
        self.max_depth = max_depth
        self.mtry = mtry
        self.nuisance_params = nuisance_params
        self.random_state = random_state

    def forest_params(self):
        return ForestParams(
            self.n_trees,
            self.sample_fraction,
            self.honesty_fraction,
            self.min_leaf_size,
            self.max_depth,
            self.mtry,
            self.random_state,
        )

    def fit(self, X, y, w):
        d = X if isinstance(X, Dataset) else Dataset(check_array(X), y, w)
        params = self.forest_params()
        folds = make_folds(d.n, self.n_folds, self.random_state)
        self.result_ = crossfit_cate(d, folds, params, self.clip, self.nuisance_params)
        self.tau_hf_ = self.result_.tau_hf
        self.n_features_in_ = d.p
        return self

    def predict(self, X=None):
        check_is_fitted(self, "result_")
        if X is None:
            return self.tau_hf_
        return self.result_.predict(check_array(X))

    def kernel(self, X=None):
        check_is_fitted(self, "result_")
        if X is None:
            return self.result_.kernel_hf
        return crossfit_kernel(self.result_, check_array(X))
