"""Dense symmetric eigendecomposition and k-means.

Both routines are deterministic: eigenvector signs and tie orders are fixed,
and k-means draws every random number from a seeded generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

__all__ = ["EigenDecomposition", "KMeansResult", "sym_eigen", "jacobi_eigen", "kmeans"]


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues in ascending order; ``vectors[:, i]`` pairs with ``values[i]``."""

    values: np.ndarray
    vectors: np.ndarray


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int
    n_init: int
    inertia_history: list = field(default_factory=list)


def _canonical_signs(vectors):
    # largest-magnitude component made positive (first index on exact ties)
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


@njit(cache=True)
def _jacobi_sweeps(a, tol, max_sweeps):
    m = a.shape[0]
    v = np.eye(m)
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(m):
            for j in range(i + 1, m):
                off += a[i, j] * a[i, j]
        if off <= tol:
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for r in range(m):
                    arp = a[r, p]
                    arq = a[r, q]
                    a[r, p] = c * arp - s * arq
                    a[r, q] = s * arp + c * arq
                for r in range(m):
                    apr = a[p, r]
                    aqr = a[q, r]
                    a[p, r] = c * apr - s * aqr
                    a[q, r] = s * apr + c * aqr
                for r in range(m):
                    vrp = v[r, p]
                    vrq = v[r, q]
                    v[r, p] = c * vrp - s * vrq
                    v[r, q] = s * vrp + c * vrq
    return np.diag(a).copy(), v


def _prepare(A):
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix contains non-finite entries")
    return 0.5 * (A + A.T)


def _finish(values, vectors):
    order = np.argsort(values, kind="stable")
    return EigenDecomposition(values[order], _canonical_signs(vectors[:, order]))


def jacobi_eigen(A, tol=1e-24, max_sweeps=100):
    """Cyclic Jacobi rotations; O(m^3) per sweep, intended for small matrices."""
    A = _prepare(A)
    scale = max(np.sum(A * A), 1e-300)
    values, vectors = _jacobi_sweeps(A.copy(), tol * scale, max_sweeps)
    return _finish(values, vectors)


def sym_eigen(A, method="lapack"):
    """Full eigendecomposition of a symmetric matrix.

    The input is symmetrized as ``(A + A.T) / 2``. ``method="lapack"`` calls the
    divide-and-conquer LAPACK driver through numpy; ``method="jacobi"`` uses the
    in-house cyclic Jacobi solver. Both return ascending eigenvalues with the
    largest-magnitude component of each eigenvector made positive.
    """
    if method == "jacobi":
        return jacobi_eigen(A)
    if method != "lapack":
        raise ValueError(f"unknown eigensolver {method!r}")
    A = _prepare(A)
    values, vectors = np.linalg.eigh(A)
    return _finish(values, vectors)


def _sq_dists(points, centers):
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ikd,ikd->ik", diff, diff)


def _kmeans_pp(points, k, rng):
    m = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(m)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(m)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, m - 1)
        centers[c] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    return centers


def _centers_of(points, labels, k):
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, labels, points)
    return sums / counts[:, None]


def _lloyd(points, centers, max_iter, tol):
    k = centers.shape[0]
    history = []
    labels = None
    prev = np.inf
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(points, centers)
        labels = np.argmin(d2, axis=1)
        own = d2[np.arange(len(labels)), labels]
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # reseed the empty cluster at the point farthest from its center
            movable = counts[labels] > 1
            far = int(np.argmax(np.where(movable, own, -1.0)))
            counts[labels[far]] -= 1
            labels[far] = c
            counts[c] += 1
            own[far] = 0.0
        centers = _centers_of(points, labels, k)
        inertia = float(np.sum((points - centers[labels]) ** 2))
        history.append(inertia)
        if prev - inertia <= tol * max(prev, 1e-300) or inertia == 0.0:
            break
        prev = inertia
    return labels, centers, history, n_iter


def kmeans(points, k, seed=0, n_init=10, max_iter=300, tol=1e-8):
    """k-means++ seeding followed by Lloyd iterations; best of ``n_init`` runs."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    m = points.shape[0]
    if k <= 0:
        raise ValueError("k must be positive")
    if k > m:
        raise ValueError(f"k={k} exceeds the number of points {m}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        init = _kmeans_pp(points, k, rng)
        labels, centers, history, n_iter = _lloyd(points, init, max_iter, tol)
        if best is None or history[-1] < best.inertia:
            best = KMeansResult(labels, centers, history[-1], n_iter, n_init, history)
    return best
