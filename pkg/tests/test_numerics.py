import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from causal_clustering.numerics import jacobi_eigen, kmeans, sym_eigen


def test_identity_eigenvalues():
    eig = sym_eigen(np.eye(3))
    np.testing.assert_allclose(eig.values, [1, 1, 1])


def test_diagonal_sorted_with_permutation_vectors():
    eig = sym_eigen(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_allclose(eig.values, [1, 2, 3])
    np.testing.assert_allclose(np.abs(eig.vectors), np.eye(3)[:, [1, 2, 0]], atol=1e-12)


def test_two_by_two_characteristic_polynomial():
    # (2 - l)^2 - 1 = 0  ->  l in {1, 3}
    eig = sym_eigen(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(eig.values, [1.0, 3.0], atol=1e-12)


def test_sign_convention_largest_component_positive(rng):
    A = rng.normal(size=(6, 6))
    vecs = sym_eigen(A + A.T).vectors
    idx = np.argmax(np.abs(vecs), axis=0)
    assert np.all(vecs[idx, np.arange(6)] > 0)


def test_jacobi_matches_lapack(rng):
    A = rng.normal(size=(12, 12))
    A = A + A.T
    a, b = sym_eigen(A, "lapack"), jacobi_eigen(A)
    np.testing.assert_allclose(a.values, b.values, atol=1e-10)
    np.testing.assert_allclose(np.abs(a.vectors.T @ b.vectors), np.eye(12), atol=1e-8)


sym_matrices = st.integers(1, 8).flatmap(
    lambda m: arrays(np.float64, (m, m), elements=st.floats(-10, 10, allow_nan=False, allow_infinity=False))
).map(lambda a: a + a.T)


@given(sym_matrices, st.sampled_from(["lapack", "jacobi"]))
def test_trace_and_reconstruction(A, method):
    eig = sym_eigen(A, method)
    fro = np.linalg.norm(A)
    assert abs(eig.values.sum() - np.trace(A)) <= 1e-8 * max(fro, 1e-300) + 1e-12
    recon = eig.vectors @ np.diag(eig.values) @ eig.vectors.T
    assert np.linalg.norm(recon - A) <= 1e-7 * fro + 1e-12
    assert np.all(np.diff(eig.values) >= 0)


def test_kmeans_k_equals_m():
    pts = np.array([[0.0], [1.0], [5.0], [7.0]])
    res = kmeans(pts, 4)
    assert res.inertia == 0.0
    assert len(set(res.labels.tolist())) == 4


def test_kmeans_two_pairs_matches_brute_force():
    pts = np.array([[0.0], [0.1], [10.0], [10.1]])
    best = None
    for mask in itertools.product([0, 1], repeat=4):
        lab = np.array(mask)
        if lab.min() == lab.max():
            continue
        cost = sum(((pts[lab == c] - pts[lab == c].mean()) ** 2).sum() for c in (0, 1))
        if best is None or cost < best[0]:
            best = (cost, lab)
    res = kmeans(pts, 2, seed=1)
    assert res.labels[0] == res.labels[1] != res.labels[2] == res.labels[3]
    assert res.inertia == pytest.approx(best[0])


def test_kmeans_single_cluster(rng):
    pts = rng.normal(size=(30, 3))
    res = kmeans(pts, 1)
    np.testing.assert_allclose(res.centers[0], pts.mean(axis=0))
    assert res.inertia == pytest.approx(pts.var(axis=0).sum() * 30)


def test_kmeans_rejects_bad_k(rng):
    pts = rng.normal(size=(5, 2))
    with pytest.raises(ValueError):
        kmeans(pts, 0)
    with pytest.raises(ValueError):
        kmeans(pts, 6)


def test_kmeans_deterministic(rng):
    pts = rng.normal(size=(50, 2))
    a, b = kmeans(pts, 3, seed=9), kmeans(pts, 3, seed=9)
    np.testing.assert_array_equal(a.labels, b.labels)


@given(
    arrays(np.float64, st.tuples(st.integers(4, 40), st.integers(1, 3)), elements=st.floats(-50, 50)),
    st.integers(1, 4),
    st.integers(0, 100),
)
def test_kmeans_inertia_never_increases(pts, k, seed):
    k = min(k, pts.shape[0])
    res = kmeans(pts, k, seed=seed, n_init=2)
    hist = np.asarray(res.inertia_history)
    assert np.all(np.diff(hist) <= 1e-9 * max(1.0, hist.max(initial=0.0)))
