"""Kernelized clustering of effect estimates.

Two solvers are provided: normalized spectral clustering of a similarity
kernel, and sum-of-norms (convex) clustering, which fuses the scalar effect
estimates along kernel-weighted pairs. Four heuristics choose the number of
spectral clusters.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .forest import KernelMatrix
from .numerics import kmeans, sym_eigen
from .pipeline import CrossFitCATE

__all__ = [
    "Embedding",
    "ClusterResult",
    "SonConfig",
    "KSelection",
    "SonConvergenceError",
    "LaplacianSpectrum",
    "spectral_embed",
    "spectral_cluster",
    "son_cluster",
    "son_path",
    "lambda_search",
    "select_k_eigengap",
    "select_k_elbow",
    "select_k_silhouette",
    "select_k_gap",
    "elbow_from_inertia",
    "silhouette_score",
    "gap_statistic",
    "cluster_means",
    "canonical_labels",
    "lambda_grid",
    "SELECTORS",
    "cluster_effects",
    "CausalClustering",
]

log = logging.getLogger(__name__)


class SonConvergenceError(RuntimeError):
    pass


@dataclass
class Embedding:
    values: np.ndarray
    provenance: str
    zero_rows: np.ndarray


@dataclass
class ClusterResult:
    labels: np.ndarray
    k: int
    means: Optional[np.ndarray]
    sizes: np.ndarray
    ses: Optional[np.ndarray]
    diagnostics: dict = field(default_factory=dict)
    fitted: Optional[np.ndarray] = None

    def expand(self):
        """Cluster-mean effect for every sample."""
        return self.means[self.labels]

    def to_csv(self, path, tau, ids=None):
        """Per-sample table: id, label, tau_hat, cluster_mean, cluster_se."""
        tau = np.asarray(tau, dtype=np.float64).ravel()
        ids = np.arange(tau.size) if ids is None else ids
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "label", "tau_hat", "cluster_mean", "cluster_se"])
            for i, c in enumerate(self.labels):
                writer.writerow([ids[i], int(c), repr(float(tau[i])), repr(float(self.means[c])), repr(float(self.ses[c]))])

    def summary(self):
        diag = {k: v for k, v in self.diagnostics.items() if not k.startswith("_") and k != "objective_trace"}
        out = {"k": self.k, "sizes": self.sizes.tolist(), "diagnostics": diag}
        if self.means is not None:
            out["means"] = self.means.tolist()
            out["ses"] = self.ses.tolist()
        if self.fitted is not None:
            out["fitted"] = self.fitted.tolist()
        return out

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class SonConfig:
    lam: float = 0.0
    max_iter: int = 5000
    merge_tol: float = 1e-6
    tol: float = 1e-8
    min_weight: float = 1e-12

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.merge_tol <= 0 or self.tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class KSelection:
    k: int
    scores: dict
    degenerate: bool = False


def _kernel_values(K):
    A = K.values if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"kernel must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("kernel contains non-finite values")
    return A


def _provenance(K):
    return K.provenance if isinstance(K, KernelMatrix) else "array"


class LaplacianSpectrum:
    """Eigendecomposition of ``I - D^-1/2 K D^-1/2``, computed once per kernel.

    Negative kernel entries are clamped to zero (counted in ``n_clamped``).
    """

    def __init__(self, K, method="lapack"):
        A = _kernel_values(K)
        self.provenance = _provenance(K)
        A = 0.5 * (A + A.T)
        neg = A < 0
        self.n_clamped = int(neg.sum())
        if self.n_clamped:
            log.info("clamped %d negative kernel entries to zero", self.n_clamped)
            A = np.where(neg, 0.0, A)
        deg = A.sum(axis=1)
        zero = np.flatnonzero(deg <= 0)
        if zero.size:
            raise ValueError(f"row {int(zero[0])} of the kernel has zero degree (isolated point)")
        self.degrees = deg
        # every row identical: all points are interchangeable, no structure to find
        self.identical_rows = bool(np.max(np.abs(A - A[:1]), initial=0.0) <= 1e-12 * np.max(np.abs(A)))
        inv_sqrt = 1.0 / np.sqrt(deg)
        L = np.eye(A.shape[0]) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
        eig = sym_eigen(L, method=method)
        self.values = eig.values
        self.vectors = eig.vectors

    @property
    def m(self):
        return self.values.shape[0]

    def embedding(self, k):
        E = self.vectors[:, :k].copy()
        norms = np.linalg.norm(E, axis=1)
        zero = norms <= 1e-12
        E[~zero] /= norms[~zero, None]
        E[zero] = 0.0
        return Embedding(E, self.provenance, zero)

    def diffusion_coordinates(self, dims):
        """Random-walk eigenvectors scaled by ``max(1 - eigenvalue, 0)``."""
        dims = min(dims, self.m)
        V = self.vectors[:, :dims] / np.sqrt(self.degrees)[:, None]
        V = V / np.linalg.norm(V, axis=0)
        return V * np.maximum(1.0 - self.values[:dims], 0.0)


def _spectrum(K):
    return K if isinstance(K, LaplacianSpectrum) else LaplacianSpectrum(K)


def spectral_embed(K, k):
    """First ``k`` eigenvectors of the normalized Laplacian, rows scaled to unit norm."""
    if k < 1:
        raise ValueError("k must be at least 1")
    spec = _spectrum(K)
    if k > spec.m:
        raise ValueError(f"k={k} exceeds the number of points {spec.m}")
    emb = spec.embedding(k)
    if emb.zero_rows.any():
        log.info("%d embedding rows are zero", int(emb.zero_rows.sum()))
    return emb


def canonical_labels(labels, tau=None):
    """Relabel clusters 0..k-1 by ascending mean of ``tau`` (ties: first member)."""
    labels = np.asarray(labels)
    uniq, codes = np.unique(labels, return_inverse=True)
    first = np.full(uniq.size, labels.size)
    np.minimum.at(first, codes, np.arange(labels.size))
    if tau is None:
        order = np.argsort(first, kind="stable")
    else:
        means = np.bincount(codes, weights=tau) / np.bincount(codes)
        order = np.lexsort((first, means))
    remap = np.empty(uniq.size, dtype=np.int64)
    remap[order] = np.arange(uniq.size)
    return remap[codes]


def cluster_means(tau, labels):
    """Per-cluster mean, size and standard error of the mean.

    Returns ``(means, counts, ses, singleton)``; singleton clusters get SE 0
    and are flagged.
    """
    tau = np.asarray(tau, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if tau.size == 0:
        raise ValueError("empty input")
    if labels.size != tau.size:
        raise ValueError("labels and tau differ in length")
    uniq, codes = np.unique(labels, return_inverse=True)
    counts = np.bincount(codes)
    means = np.bincount(codes, weights=tau) / counts
    ss = np.bincount(codes, weights=(tau - means[codes]) ** 2)
    singleton = counts == 1
    ses = np.zeros(uniq.size)
    ok = ~singleton
    ses[ok] = np.sqrt(ss[ok] / (counts[ok] - 1)) / np.sqrt(counts[ok])
    return means, counts, ses, singleton


def _result(labels, tau, diagnostics, fitted=None):
    labels = canonical_labels(labels, tau)
    k = int(labels.max()) + 1
    sizes = np.bincount(labels, minlength=k)
    means = ses = None
    if tau is not None:
        means, _, ses, singleton = cluster_means(tau, labels)
        if singleton.any():
            diagnostics["singleton_clusters"] = int(singleton.sum())
    if fitted is not None:
        fitted = np.bincount(labels, weights=fitted, minlength=k) / sizes
    return ClusterResult(labels, k, means, sizes, ses, diagnostics, fitted)


def spectral_cluster(K, k, tau=None, seed=0, n_init=10):
    """Normalized spectral clustering: k-means on the row-normalized embedding."""
    spec = _spectrum(K)
    if not 1 <= k <= spec.m:
        raise ValueError(f"k={k} outside [1, {spec.m}]")
    if tau is not None:
        tau = np.asarray(tau, dtype=np.float64).ravel()
        if tau.size != spec.m:
            raise ValueError("tau and kernel differ in size")
    emb = spectral_embed(spec, k)
    km = kmeans(emb.values, k, seed=seed, n_init=n_init)
    diag = {
        "solver": "spectral",
        "inertia": km.inertia,
        "eigenvalues": spec.values[: min(spec.m, k + 1)].tolist(),
        "clamped_entries": spec.n_clamped,
    }
    return _result(km.labels, tau, diag)


# --- sum-of-norms clustering ---------------------------------------------------------


@njit(cache=True)
def _son_dual(tau, ei, ej, c, z0, step, max_iter, tol):
    """Accelerated projected gradient on the dual of
    ``sum (U - tau)^2 + sum_e c_e |U_i - U_j|`` with function-value restarts.

    Returns dual variables, primal point, best primal trace, gap and iterations.
    """
    m = tau.shape[0]
    n_e = ei.shape[0]
    z = z0.copy()
    z_prev = z0.copy()
    U = tau.copy()
    for e in range(n_e):
        U[ei[e]] -= 0.5 * z[e]
        U[ej[e]] += 0.5 * z[e]
    U_prev = U.copy()
    Uy = np.empty(m)
    trace = np.empty(max_iter + 1)
    t = 1.0
    g_old = -np.inf
    best = np.inf
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_new
        for i in range(m):
            Uy[i] = U[i] + beta * (U[i] - U_prev[i])
        for e in range(n_e):
            zy = z[e] + beta * (z[e] - z_prev[e])
            v = zy + step * (Uy[ei[e]] - Uy[ej[e]])
            if v > c[e]:
                v = c[e]
            elif v < -c[e]:
                v = -c[e]
            z_prev[e] = z[e]
            z[e] = v
        for i in range(m):
            U_prev[i] = U[i]
            U[i] = tau[i]
        lin = 0.0
        for e in range(n_e):
            U[ei[e]] -= 0.5 * z[e]
            U[ej[e]] += 0.5 * z[e]
            lin += z[e] * (tau[ei[e]] - tau[ej[e]])
        quad = 0.0
        for i in range(m):
            quad += (U[i] - tau[i]) ** 2
        g = lin - quad
        pen = 0.0
        for e in range(n_e):
            pen += c[e] * abs(U[ei[e]] - U[ej[e]])
        primal = quad + pen
        if primal < best:
            best = primal
        trace[it - 1] = best
        gap = primal - g
        if gap <= tol * max(abs(primal), 1e-300):
            break
        if g < g_old:
            # restart momentum
            t = 1.0
            for e in range(n_e):
                z_prev[e] = z[e]
            for i in range(m):
                U_prev[i] = U[i]
        else:
            t = t_new
        g_old = g
    return z, U, trace[:it], gap, it, g


def _edges(K, min_weight):
    A = _kernel_values(K)
    A = 0.5 * (A + A.T)
    clamped = int(np.sum(A < 0))
    iu, ju = np.triu_indices(A.shape[0], 1)
    w = A[iu, ju]
    keep = w >= min_weight
    return iu[keep].astype(np.int64), ju[keep].astype(np.int64), w[keep], clamped


def _primal(U, tau, ei, ej, c):
    return float(np.sum((U - tau) ** 2) + np.sum(c * np.abs(U[ei] - U[ej])))


def _group_values(tau, groups, order, ei, ej, c):
    """Exact minimiser when U is constant on ``groups`` with a fixed ordering."""
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    gi, gj = rank[groups[ei]], rank[groups[ej]]
    cross = gi != gj
    push = np.zeros(len(order))
    # pairs (i, j) with group(i) above group(j) pull group(i) down by c/2 and group(j) up
    hi = np.where(gi > gj, groups[ei], groups[ej])[cross]
    lo = np.where(gi > gj, groups[ej], groups[ei])[cross]
    np.add.at(push, hi, -c[cross])
    np.add.at(push, lo, c[cross])
    sizes = np.bincount(groups, minlength=len(order))
    sums = np.bincount(groups, weights=tau, minlength=len(order))
    return (sums + 0.5 * push) / sizes


def _groups_within(U, tol):
    order = np.argsort(U, kind="stable")
    breaks = np.diff(U[order]) > tol
    gid_sorted = np.concatenate([[0], np.cumsum(breaks)])
    groups = np.empty(U.size, dtype=np.int64)
    groups[order] = gid_sorted
    return groups


def _polish(U, tau, ei, ej, c, scale):
    """Snap U onto the best exactly-fused candidate partition."""
    best_U, best_P = U, _primal(U, tau, ei, ej, c)
    for rel in (1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3):
        groups = _groups_within(U, rel * scale)
        n_g = int(groups.max()) + 1
        if n_g == U.size and rel > 1e-9:
            continue
        approx = np.bincount(groups, weights=U, minlength=n_g) / np.bincount(groups, minlength=n_g)
        order = np.argsort(approx, kind="stable")
        vals = _group_values(tau, groups, order, ei, ej, c)
        if np.any(np.diff(vals[order]) < 0):
            continue
        cand = vals[groups]
        P = _primal(cand, tau, ei, ej, c)
        if P <= best_P:
            best_U, best_P = cand, P
    return best_U, best_P


def _son_solve(tau, ei, ej, w, cfg, z0=None):
    c = cfg.lam * w
    z0 = np.zeros(ei.size) if z0 is None else np.clip(z0, -c, c)
    if ei.size == 0 or cfg.lam == 0.0:
        return tau.copy(), z0, {"iterations": 0, "gap": 0.0, "objective": 0.0, "objective_trace": [0.0]}
    deg = np.bincount(ei, minlength=tau.size) + np.bincount(ej, minlength=tau.size)
    lip = 0.5 * float(np.max(deg[ei] + deg[ej]))
    z, U, trace, gap, iters, dual = _son_dual(tau, ei, ej, c, z0, 1.0 / lip, cfg.max_iter, cfg.tol)
    scale = max(float(np.ptp(tau)), 1e-300)
    U_pol, P = _polish(U, tau, ei, ej, c, scale)
    gap = P - dual
    trace = list(trace)
    trace.append(min(P, trace[-1]))
    if gap > cfg.tol * max(abs(P), 1e-300) and gap > 1e-12 * max(scale**2, 1.0):
        raise SonConvergenceError(
            f"SON solver did not converge in {cfg.max_iter} iterations (lambda={cfg.lam:g}, duality gap {gap:.3e})"
        )
    return U_pol, z, {"iterations": int(iters), "gap": float(gap), "objective": float(P), "objective_trace": trace}


def _son_labels(U, tau, cfg):
    scale = float(np.ptp(tau))
    return _groups_within(U, cfg.merge_tol * scale)


def son_cluster(tau_hf, K, cfg=None, _warm=None):
    """Sum-of-norms clustering of scalar effects with kernel fusion weights.

    Solves ``min_U sum_i (U_i - tau_i)^2 + lam * sum_{i<j} K_ij |U_i - U_j|`` and
    groups samples whose fitted values agree within ``merge_tol * range(tau)``.
    """
    cfg = cfg or SonConfig()
    tau = np.asarray(tau_hf, dtype=np.float64).ravel()
    ei, ej, w, clamped = _edges(K, cfg.min_weight)
    if _kernel_values(K).shape[0] != tau.size:
        raise ValueError("tau and kernel differ in size")
    U, z, info = _son_solve(tau, ei, ej, w, cfg, _warm)
    labels = _son_labels(U, tau, cfg)
    diag = {"solver": "son", "lambda": cfg.lam, "active_pairs": int(ei.size), "clamped_entries": clamped, **info}
    res = _result(labels, tau, diag, fitted=U)
    res.diagnostics["_dual"] = z
    return res


def lambda_grid(tau, K, n_points=50, low=1e-4, high=1e4, min_weight=1e-12):
    A = _kernel_values(K)
    iu = np.triu_indices(A.shape[0], 1)
    pos = A[iu][A[iu] >= min_weight]
    mean_w = float(pos.mean()) if pos.size else 1.0
    scale = max(float(np.ptp(tau)), 1e-12) / mean_w
    return np.geomspace(low, high, n_points) * scale


def son_path(tau_hf, K, lambdas, cfg=None, stop_at=None):
    """Warm-started SON solutions along increasing ``lambdas``."""
    cfg = cfg or SonConfig()
    tau = np.asarray(tau_hf, dtype=np.float64).ravel()
    ei, ej, w, _ = _edges(K, cfg.min_weight)
    out = []
    z = None
    for lam in np.sort(np.asarray(lambdas, dtype=np.float64)):
        c = SonConfig(float(lam), cfg.max_iter, cfg.merge_tol, cfg.tol, cfg.min_weight)
        U, z, info = _son_solve(tau, ei, ej, w, c, z)
        labels = _son_labels(U, tau, c)
        res = _result(labels, tau, {"solver": "son", "lambda": float(lam), "active_pairs": int(ei.size), **info}, U)
        out.append((float(lam), res))
        if stop_at is not None and res.k <= stop_at:
            break
    return out


def lambda_search(tau_hf, K, target_k, cfg=None, lambdas=None):
    """Smallest grid lambda whose SON solution has at most ``target_k`` clusters.

    Returns ``(lam, result)``. When no grid point gives exactly ``target_k``
    clusters, the grid point with the closest count is returned and
    ``result.diagnostics["exact_k"]`` is False.
    """
    tau = np.asarray(tau_hf, dtype=np.float64).ravel()
    if not 1 <= target_k <= tau.size:
        raise ValueError(f"target_k must lie in [1, {tau.size}]")
    if lambdas is None:
        lambdas = lambda_grid(tau, K, min_weight=(cfg or SonConfig()).min_weight)
    path = son_path(tau, K, lambdas, cfg, stop_at=target_k)
    lam, res = path[-1]
    if res.k != target_k and len(path) > 1 and res.k < target_k:
        prev_lam, prev = path[-2]
        if abs(prev.k - target_k) < abs(res.k - target_k):
            lam, res = prev_lam, prev
    res.diagnostics["exact_k"] = res.k == target_k
    res.diagnostics["path_counts"] = [r.k for _, r in path]
    return lam, res


# --- choosing k ----------------------------------------------------------------------


def select_k_eigengap(K, k_max=10):
    """Count of eigenvalues before the largest gap in the Laplacian spectrum."""
    if k_max < 2:
        raise ValueError("k_max must be at least 2")
    spec = _spectrum(K)
    k_max = min(k_max, spec.m - 1)
    vals = spec.values[: k_max + 1]
    gaps = np.diff(vals)
    k = int(np.argmax(gaps)) + 1
    degenerate = bool(gaps.max() <= 1e-10)
    if degenerate:
        log.warning("eigengap is degenerate: the Laplacian spectrum is flat")
    return KSelection(k, {"eigenvalues": vals.tolist(), "gaps": gaps.tolist()}, degenerate)


def elbow_from_inertia(inertia):
    """Index (as a cluster count) maximizing the centred second difference.

    ``inertia[0]`` is the inertia for one cluster. Candidates run from 2 to
    ``len(inertia) - 1``; the first maximum wins.
    """
    inertia = np.asarray(inertia, dtype=np.float64)
    if inertia.size < 3:
        raise ValueError("need inertia for at least k = 1, 2, 3")
    second = inertia[:-2] - 2.0 * inertia[1:-1] + inertia[2:]
    return int(np.argmax(second)) + 2


def _within_ss(Z, labels):
    out = 0.0
    for c in np.unique(labels):
        block = Z[labels == c]
        out += float(np.sum((block - block.mean(axis=0)) ** 2))
    return out


def _selector_sweep(spec, k_max, tau, seed):
    return {k: spectral_cluster(spec, k, tau, seed=seed) for k in range(2, k_max + 1)}


def select_k_elbow(K, k_max=10, seed=0):
    """Elbow of within-cluster dispersion of spectral clusterings.

    Dispersion is measured in a common diffusion-coordinate embedding so the
    curve is comparable across k; the one-cluster value is the total sum of
    squares.
    """
    if k_max < 2:
        raise ValueError("k_max must be at least 2")
    spec = _spectrum(K)
    k_max = min(k_max, spec.m - 1)
    Z = spec.diffusion_coordinates(k_max)
    inertia = [_within_ss(Z, np.zeros(spec.m, dtype=np.int64))]
    for k, res in _selector_sweep(spec, k_max + 1 if k_max + 1 < spec.m else k_max, None, seed).items():
        inertia.append(_within_ss(Z, res.labels))
    inertia = inertia[: k_max + 2]
    if len(inertia) < 3:
        return KSelection(2, {"inertia": inertia}, True)
    k = elbow_from_inertia(inertia)
    return KSelection(min(k, k_max), {"inertia": inertia})


def silhouette_score(Z, labels):
    """Mean silhouette; members of singleton clusters score 0."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    labels = np.asarray(labels)
    uniq, codes = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        return 0.0
    sq = np.sum(Z * Z, axis=1)
    D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * Z @ Z.T, 0.0))
    np.fill_diagonal(D, 0.0)
    counts = np.bincount(codes)
    sums = np.zeros((Z.shape[0], uniq.size))
    for c in range(uniq.size):
        sums[:, c] = D[:, codes == c].sum(axis=1)
    own = counts[codes]
    a = sums[np.arange(Z.shape[0]), codes] / np.maximum(own - 1, 1)
    mean_other = sums / counts[None, :]
    mean_other[np.arange(Z.shape[0]), codes] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def select_k_silhouette(K, k_max=10, seed=0):
    """Cluster count with the highest mean silhouette in its own spectral embedding."""
    if k_max < 2:
        raise ValueError("k_max must be at least 2")
    spec = _spectrum(K)
    if spec.identical_rows:
        return KSelection(2, {"silhouette": {2: 0.0}}, True)
    k_max = min(k_max, spec.m - 1)
    scores = {
        k: silhouette_score(spec.embedding(k).values, res.labels)
        for k, res in _selector_sweep(spec, k_max, None, seed).items()
    }
    if max(scores.values()) <= 0.0:
        return KSelection(2, {"silhouette": scores}, True)
    k = max(scores, key=lambda kk: (scores[kk], -kk))
    return KSelection(int(k), {"silhouette": scores})


def gap_statistic(points, k_max=10, n_refs=50, seed=0, n_init=3):
    """Gap statistic with uniform bounding-box references and the one-SE rule.

    Returns ``(k, gaps, s)`` where ``gaps[k-1]`` and ``s[k-1]`` belong to ``k``.
    """
    Z = np.asarray(points, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    m = Z.shape[0]
    k_max = min(k_max, m)
    rng = np.random.default_rng(seed)
    lo, hi = Z.min(axis=0), Z.max(axis=0)

    def log_w(data, k, s):
        total = float(np.sum((data - data.mean(axis=0)) ** 2))
        w = total if k == 1 else kmeans(data, k, seed=s, n_init=n_init).inertia
        # floor keeps exact-duplicate data (W_k = 0) finite
        return math.log(max(w, 1e-12 * total, 1e-300))

    seeds = rng.integers(2**31, size=(n_refs + 1, k_max))
    refs = [lo + (hi - lo) * rng.random(Z.shape) for _ in range(n_refs)]
    gaps = np.empty(k_max)
    s = np.empty(k_max)
    for k in range(1, k_max + 1):
        obs = log_w(Z, k, int(seeds[0, k - 1]))
        ref = np.array([log_w(R, k, int(seeds[b + 1, k - 1])) for b, R in enumerate(refs)])
        gaps[k - 1] = ref.mean() - obs
        s[k - 1] = ref.std() * math.sqrt(1.0 + 1.0 / n_refs)
    k_sel = k_max
    for k in range(1, k_max):
        if gaps[k - 1] >= gaps[k] - s[k]:
            k_sel = k
            break
    return k_sel, gaps, s


def select_k_gap(K, k_max=10, n_refs=50, seed=0):
    """Gap statistic on the diffusion-coordinate embedding of the kernel."""
    if k_max < 2:
        raise ValueError("k_max must be at least 2")
    spec = _spectrum(K)
    k_max = min(k_max, spec.m - 1)
    Z = spec.diffusion_coordinates(k_max)
    k, gaps, s = gap_statistic(Z, k_max, n_refs, seed)
    return KSelection(int(k), {"gap": gaps.tolist(), "s": s.tolist()})


SELECTORS = {
    "eigengap": lambda spec, k_max, seed: select_k_eigengap(spec, k_max),
    "elbow": lambda spec, k_max, seed: select_k_elbow(spec, k_max, seed=seed),
    "silhouette": lambda spec, k_max, seed: select_k_silhouette(spec, k_max, seed=seed),
    "gap": lambda spec, k_max, seed: select_k_gap(spec, k_max, seed=seed),
}


def cluster_effects(tau, K, solver="spectral", n_clusters="eigengap", lam=None, k_max=10, seed=0, son=None):
    """Cluster effect estimates ``tau`` with kernel ``K``.

    ``n_clusters`` is an integer or the name of a selector. For the SON
    solver an explicit ``lam`` takes precedence; otherwise lambda is searched
    for the requested (or selected) cluster count.

    Returns ``(result, info)`` where ``info`` records the chosen k or lambda.
    """
    tau = np.asarray(tau, dtype=np.float64).ravel()
    info = {"solver": solver}
    if solver == "son" and lam is not None:
        res = son_cluster(tau, K, SonConfig(lam=float(lam), **(son or {})))
        info["lambda"] = float(lam)
        return res, info
    spec = None
    if isinstance(n_clusters, str):
        if n_clusters not in SELECTORS:
            raise ValueError(f"unknown selector {n_clusters!r}; choose from {sorted(SELECTORS)}")
        spec = LaplacianSpectrum(K)
        sel = SELECTORS[n_clusters](spec, k_max, seed)
        k = sel.k
        info.update(selector=n_clusters, selected_k=k, degenerate=sel.degenerate)
    else:
        k = int(n_clusters)
    if solver == "spectral":
        res = spectral_cluster(spec if spec is not None else K, k, tau, seed=seed)
    elif solver == "son":
        lam, res = lambda_search(tau, K, k, SonConfig(**(son or {})))
        info["lambda"] = float(lam)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    info["k"] = res.k
    return res, info


class CausalClustering(ClusterMixin, BaseEstimator):
    """Cross-fitted causal forest followed by kernelized clustering of effects.

    Parameters
    ----------
    n_clusters : int or {"eigengap", "elbow", "silhouette", "gap"}
        Number of clusters, or the heuristic choosing it.
    solver : {"spectral", "son"}
    lam : float, optional
        SON penalty. When omitted, lambda is searched for ``n_clusters``.
    k_max : int
        Largest count considered by the heuristics.

    Attributes
    ----------
    labels_ : ndarray
        Cluster of each training sample, ordered by ascending mean effect.
    cluster_means_, cluster_ses_, cluster_sizes_ : ndarray
    tau_hf_ : ndarray
        Out-of-fold effect estimates.
    n_clusters_ : int
    lam_ : float or None
    """

    def __init__(
        self,
        n_clusters="eigengap",
        solver="spectral",
        lam=None,
        k_max=10,
        n_folds=5,
        clip=0.01,
        n_trees=500,
        sample_fraction=0.5,
        honesty_fraction=0.5,
        min_leaf_size=5,
        max_depth=None,
        mtry=None,
        random_state=0,
    ):
        self.n_clusters = n_clusters
        self.solver = solver
        self.lam = lam
        self.k_max = k_max
        self.n_folds = n_folds
        self.clip = clip
        self.n_trees = n_trees
        self.sample_fraction = sample_fraction
        self.honesty_fraction = honesty_fraction
        self.min_leaf_size = min_leaf_size
        self.max_depth = max_depth
        self.mtry = mtry
        self.random_state = random_state

    def fit(self, X, y, w):
        self.cate_ = CrossFitCATE(
            n_folds=self.n_folds,
            clip=self.clip,
            n_trees=self.n_trees,
            sample_fraction=self.sample_fraction,
            honesty_fraction=self.honesty_fraction,
            min_leaf_size=self.min_leaf_size,
            max_depth=self.max_depth,
            mtry=self.mtry,
            random_state=self.random_state,
        ).fit(X, y, w)
        self.tau_hf_ = self.cate_.tau_hf_
        self.kernel_ = self.cate_.kernel()
        res, info = cluster_effects(
            self.tau_hf_, self.kernel_, self.solver, self.n_clusters, self.lam, self.k_max, self.random_state
        )
        self._store(res, info)
        self.n_features_in_ = self.cate_.n_features_in_
        return self

    def _store(self, res, info):
        self.result_ = res
        self.info_ = info
        self.labels_ = res.labels
        self.cluster_means_ = res.means
        self.cluster_ses_ = res.ses
        self.cluster_sizes_ = res.sizes
        self.n_clusters_ = res.k
        self.lam_ = info.get("lambda")

    def cluster_new(self, X):
        """Cluster unseen points with the fitted forests, without refitting.

        Effects and kernel come from the average over fold forests; the
        cluster count (spectral) or lambda (SON) found at fit time is reused.
        """
        check_is_fitted(self, "result_")
        tau = self.cate_.predict(X)
        K = self.cate_.kernel(X)
        if self.solver == "son":
            return son_cluster(tau, K, SonConfig(lam=self.lam_))
        return spectral_cluster(K, min(self.n_clusters_, tau.size), tau, seed=self.random_state)

    def predict(self, X):
        return self.cluster_new(X).labels

    def fit_predict(self, X, y, w):
        return self.fit(X, y, w).labels_

    def transform(self, X):
        """Cluster-mean effect for each row of ``X``."""
        return self.cluster_new(X).expand()
