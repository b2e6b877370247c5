import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from causal_clustering.cluster import (
    CausalClustering,
    LaplacianSpectrum,
    SonConfig,
    canonical_labels,
    cluster_effects,
    cluster_means,
    elbow_from_inertia,
    gap_statistic,
    lambda_search,
    select_k_eigengap,
    select_k_elbow,
    select_k_gap,
    select_k_silhouette,
    silhouette_score,
    son_cluster,
    son_path,
    spectral_cluster,
    spectral_embed,
)
from causal_clustering.forest import KernelMatrix, rbf_kernel
from causal_clustering.metrics import adjusted_rand


def block_kernel(sizes):
    lab = np.repeat(np.arange(len(sizes)), sizes)
    return (lab[:, None] == lab[None, :]).astype(float), lab


def two_point(t1, t2, k12, lam):
    """Closed-form minimiser of (u1-t1)^2 + (u2-t2)^2 + lam*k12*|u1-u2|."""
    c = lam * k12
    if c >= abs(t1 - t2):
        m = 0.5 * (t1 + t2)
        return np.array([m, m])
    s = np.sign(t1 - t2)
    return np.array([t1 - s * c / 2, t2 + s * c / 2])


def son_objective(U, tau, K, lam):
    iu = np.triu_indices(len(tau), 1)
    return np.sum((U - tau) ** 2) + lam * np.sum(K[iu] * np.abs(U[iu[0]] - U[iu[1]]))


# --- embedding and spectral clustering ----------------------------------------------


def test_identity_kernel_embedding_flags_zero_rows():
    emb = spectral_embed(np.eye(5), 2)
    norms = np.linalg.norm(emb.values, axis=1)
    np.testing.assert_allclose(norms[~emb.zero_rows], 1.0)
    assert emb.zero_rows.sum() == 3
    assert np.all(norms[emb.zero_rows] == 0)


def test_two_block_embedding():
    K, _ = block_kernel([3, 2])
    spec = LaplacianSpectrum(K)
    np.testing.assert_allclose(spec.values[:2], 0.0, atol=1e-12)
    assert spec.values[2] > 0.5
    rows = np.round(spectral_embed(spec, 2).values, 10)
    assert len({tuple(r) for r in rows}) == 2


def test_embedding_scale_invariant(rng):
    K = rbf_kernel(rng.normal(size=(20, 2))).values
    np.testing.assert_allclose(np.abs(spectral_embed(K, 3).values), np.abs(spectral_embed(2 * K, 3).values), atol=1e-10)


def test_zero_degree_row_is_named():
    K = np.ones((4, 4))
    K[2, :] = K[:, 2] = 0.0
    with pytest.raises(ValueError, match="row 2"):
        spectral_embed(K, 2)


def test_negative_entries_clamped():
    K, _ = block_kernel([3, 3])
    K[0, 4] = K[4, 0] = -0.5
    spec = LaplacianSpectrum(K)
    assert spec.n_clamped == 2
    assert spectral_cluster(spec, 2).k == 2


def test_three_blocks_recovered():
    K, lab = block_kernel([4, 7, 5])
    res = spectral_cluster(KernelMatrix(K, "blocks"), 3)
    assert adjusted_rand(res.labels, lab) == 1.0


def test_single_cluster_mean(rng):
    tau = rng.normal(size=12)
    res = spectral_cluster(rbf_kernel(rng.normal(size=(12, 2))), 1, tau)
    assert res.k == 1 and res.means[0] == pytest.approx(tau.mean())


def test_spectral_deterministic(rng):
    K = rbf_kernel(rng.normal(size=(40, 2))).values
    a, b = spectral_cluster(K, 3, seed=5), spectral_cluster(K, 3, seed=5)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_labels_ordered_by_mean_effect():
    K, lab = block_kernel([3, 3, 3])
    tau = np.array([5, 5, 5, -1, -1, -1, 2, 2, 2], float)
    res = spectral_cluster(K, 3, tau)
    np.testing.assert_array_equal(res.labels, [2, 2, 2, 0, 0, 0, 1, 1, 1])
    np.testing.assert_allclose(res.means, [-1, 2, 5])


@given(st.lists(st.integers(3, 50), min_size=2, max_size=6), st.integers(0, 1000))
def test_block_kernels_exact(sizes, seed):
    K, lab = block_kernel(sizes)
    perm = np.random.default_rng(seed).permutation(len(lab))
    K, lab = K[np.ix_(perm, perm)], lab[perm]
    assert adjusted_rand(spectral_cluster(K, len(sizes), seed=seed).labels, lab) == 1.0
    assert select_k_eigengap(K).k == len(sizes)


# --- SON ----------------------------------------------------------------------------


def test_son_lambda_zero_is_identity():
    tau = np.array([0.3, -1.2, 0.3, 4.0])
    res = son_cluster(tau, np.ones((4, 4)), SonConfig(lam=0.0))
    assert res.k == 3
    np.testing.assert_array_equal(np.sort(res.fitted), np.sort(np.unique(tau)))


def test_son_two_point_fused():
    res = son_cluster(np.array([2.0, 0.0]), np.array([[1.0, 1.0], [1.0, 1.0]]), SonConfig(lam=3.0))
    assert res.k == 1
    np.testing.assert_allclose(res.fitted, [1.0], atol=1e-6)


def test_son_two_point_separate():
    res = son_cluster(np.array([2.0, 0.0]), np.array([[1.0, 1.0], [1.0, 1.0]]), SonConfig(lam=1.0))
    assert res.k == 2
    np.testing.assert_allclose(res.fitted[res.labels], [1.5, 0.5], atol=1e-6)


@given(
    st.floats(-10, 10),
    st.floats(-10, 10),
    st.floats(0.01, 2.0),
    st.floats(0.0, 30.0),
)
def test_son_two_point_closed_form(t1, t2, k12, lam):
    tau = np.array([t1, t2])
    K = np.array([[1.0, k12], [k12, 1.0]])
    res = son_cluster(tau, K, SonConfig(lam=lam))
    U = res.fitted[res.labels]
    exact = two_point(t1, t2, k12, lam)
    np.testing.assert_allclose(U, exact, atol=1e-6)
    f_exact = son_objective(exact, tau, K, lam)
    assert son_objective(U, tau, K, lam) <= f_exact + 1e-6 * max(1.0, abs(f_exact))


@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_son_objective_trace_monotone(seed, lam):
    r = np.random.default_rng(seed)
    tau = r.normal(size=15)
    K = rbf_kernel(r.normal(size=(15, 2))).values
    res = son_cluster(tau, K, SonConfig(lam=lam))
    trace = np.asarray(res.diagnostics["objective_trace"])
    assert np.all(np.diff(trace) <= 0)
    U = res.fitted[res.labels]
    assert son_objective(U, tau, K, lam) == pytest.approx(res.diagnostics["objective"], rel=1e-9)


def test_son_lambda_zero_exact(rng):
    tau = rng.normal(size=30)
    res = son_cluster(tau, rbf_kernel(rng.normal(size=(30, 2))), SonConfig(lam=0.0))
    assert np.max(np.abs(res.fitted[res.labels] - tau)) <= 1e-9


@given(st.integers(0, 10_000))
def test_son_path_uniform_weights_never_splits(seed):
    # with equal fusion weights on every pair, clusters only ever merge
    r = np.random.default_rng(seed)
    tau = np.repeat([0.0, 2.0, 4.0], 6) + 0.5 * r.normal(size=18)
    counts = [res.k for _, res in son_path(tau, np.ones((18, 18)), np.geomspace(1e-3, 10, 25))]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[-1] == 1


def _kkt_pair_ok(U, tau, c, i, j):
    """Subgradient condition for a fused pair {i, j}: the pair flow fits in [-c_ij, c_ij]."""
    others = [k for k in range(len(tau)) if k not in (i, j)]
    z = -(2 * (U[i] - tau[i]) + sum(c[i, k] * np.sign(U[i] - U[k]) for k in others))
    return abs(z) <= c[i, j] + 1e-9


def test_son_path_can_split_with_unequal_weights():
    # a fused pair can separate again as lambda grows when weights differ
    r = np.random.default_rng(20240611)
    tau = np.repeat([0.0, 2.0, 4.0], 10) + 0.3 * r.normal(size=30)
    K = rbf_kernel(r.normal(size=(30, 2))).values
    lo, hi = np.geomspace(1e-3, 1e2, 30)[5:7]
    a = son_cluster(tau, K, SonConfig(lam=lo, tol=1e-15, max_iter=200_000))
    b = son_cluster(tau, K, SonConfig(lam=hi, tol=1e-15, max_iter=200_000))
    assert a.labels[2] == a.labels[7] and b.labels[2] != b.labels[7]
    assert _kkt_pair_ok(a.fitted[a.labels], tau, lo * K, 2, 7)
    assert abs(a.diagnostics["gap"]) < 1e-12 and abs(b.diagnostics["gap"]) < 1e-12
    assert b.k > a.k


def test_son_config_validation():
    with pytest.raises(ValueError):
        SonConfig(lam=-1.0)
    with pytest.raises(ValueError):
        SonConfig(tol=0.0)


def test_lambda_search_all_separate(rng):
    tau = rng.normal(size=10)
    K = rbf_kernel(rng.normal(size=(10, 2)))
    grid = np.geomspace(1e-8, 1e2, 20)
    lam, res = lambda_search(tau, K, 10, lambdas=grid)
    assert lam == grid[0] and res.k == 10


def test_lambda_search_all_fused(rng):
    tau = rng.normal(size=10)
    lam, res = lambda_search(tau, rbf_kernel(rng.normal(size=(10, 2))), 1)
    assert res.k == 1
    assert res.fitted[0] == pytest.approx(tau.mean(), abs=1e-9)


def test_lambda_search_two_point_threshold():
    lam, res = lambda_search(np.array([2.0, 0.0]), np.array([[1.0, 1.0], [1.0, 1.0]]), 1)
    assert lam >= 2.0 and res.k == 1
    assert res.diagnostics["exact_k"]


# --- choosing k ---------------------------------------------------------------------


def test_eigengap_examples():
    K, _ = block_kernel([5, 6, 4])
    assert select_k_eigengap(K).k == 3
    assert select_k_eigengap(np.ones((8, 8))).k == 1
    assert select_k_eigengap(np.eye(8)).degenerate


def test_elbow_four_blocks(rng):
    K, _ = block_kernel([15, 15, 15, 15])
    noise = rng.uniform(0, 0.02, size=K.shape)
    assert select_k_elbow(K + 0.5 * (noise + noise.T), k_max=8).k == 4


def test_elbow_linear_decay_tie_rule():
    assert elbow_from_inertia([10.0, 8.0, 6.0, 4.0, 2.0, 0.0]) == 2


def test_selectors_reject_small_k_max():
    K, _ = block_kernel([3, 3])
    for f in (select_k_eigengap, select_k_elbow, select_k_silhouette, select_k_gap):
        with pytest.raises(ValueError):
            f(K, 1)


def test_silhouette_two_blobs(rng):
    X = np.vstack([rng.normal(0, 0.05, size=(15, 2)), rng.normal(5, 0.05, size=(15, 2))])
    assert select_k_silhouette(rbf_kernel(X, 1.0), k_max=6).k == 2


def test_silhouette_identical_points():
    sel = select_k_silhouette(np.ones((6, 6)), k_max=4)
    assert sel.k == 2 and sel.degenerate and sel.scores["silhouette"][2] == 0.0


def test_silhouette_hand_value():
    Z = np.array([[0.0], [0.1], [10.0], [10.1]])
    s_out = 1 - 0.1 / 10.05
    s_in = 1 - 0.1 / 9.95
    assert silhouette_score(Z, [0, 0, 1, 1]) == pytest.approx((s_out + s_in) / 2)
    assert silhouette_score(Z, [0, 0, 1, 1]) == pytest.approx(0.99, abs=1e-4)
    assert silhouette_score(Z, [0, 0, 1, 1]) > silhouette_score(Z, [0, 1, 1, 1])


def test_silhouette_singletons_score_zero():
    assert silhouette_score(np.array([[0.0], [1.0], [2.0]]), [0, 1, 2]) == 0.0


def test_gap_three_blobs(rng):
    pts = np.vstack([rng.normal(c, 0.1, size=(30, 2)) for c in ([0, 0], [4, 0], [0, 4])])
    assert gap_statistic(pts, k_max=6, n_refs=20, seed=1)[0] == 3


def test_gap_uniform_blob(rng):
    assert gap_statistic(rng.uniform(size=(100, 2)), k_max=6, n_refs=20, seed=1)[0] == 1


def test_gap_deterministic(rng):
    K = rbf_kernel(rng.normal(size=(30, 2)))
    a, b = select_k_gap(K, 5, n_refs=5, seed=3), select_k_gap(K, 5, n_refs=5, seed=3)
    assert a.k == b.k and a.scores == b.scores


# --- summaries ----------------------------------------------------------------------


def test_cluster_means_examples():
    means, counts, ses, single = cluster_means([1.0, 3.0], [0, 0])
    assert means[0] == 2.0 and counts[0] == 2 and ses[0] == pytest.approx(1.0)
    means, _, ses, single = cluster_means([1.0, 3.0, 10.0], [0, 0, 1])
    np.testing.assert_array_equal(means, [2.0, 10.0])
    assert ses[1] == 0.0 and single.tolist() == [False, True]
    with pytest.raises(ValueError):
        cluster_means([], [])


def test_canonical_labels_ascending():
    np.testing.assert_array_equal(canonical_labels([7, 7, 3, 3], [5.0, 5.0, 1.0, 1.0]), [1, 1, 0, 0])
    np.testing.assert_array_equal(canonical_labels([7, 7, 3, 3]), [0, 0, 1, 1])


def test_result_export(tmp_path):
    K, _ = block_kernel([3, 2])
    tau = np.array([1.0, 1.2, 0.8, 5.0, 5.5])
    res = spectral_cluster(K, 2, tau)
    res.to_csv(tmp_path / "c.csv", tau)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "id,label,tau_hat,cluster_mean,cluster_se"
    assert lines[4].split(",")[1:4] == ["1", "5.0", "5.25"]
    summary = json.loads(res.to_json())
    assert summary["k"] == 2 and summary["sizes"] == [3, 2]


# --- estimator ----------------------------------------------------------------------


def test_cluster_effects_son_target(rng):
    tau = np.repeat([0.0, 3.0], 8) + 0.01 * rng.normal(size=16)
    res, info = cluster_effects(tau, np.ones((16, 16)), solver="son", n_clusters=2)
    assert res.k == 2 and info["lambda"] > 0


def test_estimator_fit_predict(small_recovery):
    d = small_recovery
    est = CausalClustering(n_trees=60, random_state=1)
    labels = est.fit_predict(d.features, d.outcome, d.treatment)
    assert labels.shape == (d.n,)
    assert est.n_clusters_ == len(est.cluster_means_)
    assert np.all(np.diff(est.cluster_means_) >= 0)
    new = est.predict(d.features[:50])
    assert new.shape == (50,) and new.max() < est.n_clusters_
    assert est.transform(d.features[:50]).shape == (50,)
    assert clone(est).get_params()["n_trees"] == 60


def test_estimator_son(small_recovery):
    d = small_recovery
    est = CausalClustering(n_clusters=3, solver="son", n_trees=40).fit(d.features, d.outcome, d.treatment)
    assert est.lam_ is not None
    assert est.predict(d.features[:20]).shape == (20,)
