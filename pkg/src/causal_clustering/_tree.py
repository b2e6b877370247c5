# numba kernels for honest tree growing, routing and weight extraction
from __future__ import annotations

import numpy as np
from numba import njit

REGRESSION = 0
CAUSAL = 1


@njit(cache=True)
def _node_response(mode, idx, r1, r2, resp):
    cnt = idx.shape[0]
    if mode == REGRESSION:
        mean = 0.0
        for i in range(cnt):
            mean += r1[idx[i]]
        mean /= cnt
        for i in range(cnt):
            resp[i] = r1[idx[i]] - mean
        return True
    sww = 0.0
    swy = 0.0
    for i in range(cnt):
        w = r2[idx[i]]
        sww += w * w
        swy += w * r1[idx[i]]
    if sww <= 1e-12 * cnt:
        return False
    tau = swy / sww
    mean_ww = sww / cnt
    for i in range(cnt):
        w = r2[idx[i]]
        resp[i] = w * (r1[idx[i]] - w * tau) / mean_ww
    return True


@njit(cache=True)
def build_tree(X, r1, r2, mode, n_sub, n_struct, min_leaf, max_depth, mtry, seed):
    """Grow one honest tree.

    Returns node arrays (feature, threshold, left, right), the per-node
    estimation-sample CSR (leaf_start, leaf_count, leaf_samples) and the
    sorted structure / estimation index sets.
    """
    np.random.seed(seed)
    n, p = X.shape
    perm = np.random.permutation(n)
    struct = np.sort(perm[:n_struct])
    est = np.sort(perm[n_struct:n_sub])

    max_nodes = 2 * n_struct + 1
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    start = np.zeros(max_nodes, dtype=np.int64)
    end = np.zeros(max_nodes, dtype=np.int64)
    depth = np.zeros(max_nodes, dtype=np.int64)

    work = struct.copy()
    tmp = np.empty(n_struct, dtype=np.int64)
    resp = np.empty(n_struct)
    vals = np.empty(n_struct)
    end[0] = n_struct
    n_nodes = 1
    stack = np.empty(max_nodes, dtype=np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        s = start[node]
        e = end[node]
        cnt = e - s
        if cnt < 2 * min_leaf or depth[node] >= max_depth:
            continue
        idx = work[s:e]
        if not _node_response(mode, idx, r1, r2, resp):
            continue
        total = 0.0
        ss = 0.0
        for i in range(cnt):
            total += resp[i]
            ss += resp[i] * resp[i]
        parent = total * total / cnt
        best_gain = 1e-12 * ss
        best_f = -1
        best_thr = 0.0
        feats = np.sort(np.random.permutation(p)[:mtry])
        for f in feats:
            for i in range(cnt):
                vals[i] = X[idx[i], f]
            order = np.argsort(vals[:cnt], kind="mergesort")
            s_left = 0.0
            for k in range(1, cnt):
                s_left += resp[order[k - 1]]
                if k < min_leaf or cnt - k < min_leaf:
                    continue
                lo = vals[order[k - 1]]
                hi = vals[order[k]]
                if not lo < hi:
                    continue
                s_right = total - s_left
                gain = s_left * s_left / k + s_right * s_right / (cnt - k) - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (lo + hi)
                    if not thr < hi:
                        thr = lo
                    best_thr = thr
        if best_f < 0:
            continue
        # stable partition of the node's samples
        nl = 0
        for i in range(cnt):
            if X[idx[i], best_f] <= best_thr:
                tmp[nl] = idx[i]
                nl += 1
        nr = nl
        for i in range(cnt):
            if X[idx[i], best_f] > best_thr:
                tmp[nr] = idx[i]
                nr += 1
        for i in range(cnt):
            work[s + i] = tmp[i]
        feature[node] = best_f
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        start[lc] = s
        end[lc] = s + nl
        start[rc] = s + nl
        end[rc] = e
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        stack[top] = rc
        stack[top + 1] = lc
        top += 2

    leaf_of = np.empty(est.shape[0], dtype=np.int64)
    leaf_count = np.zeros(n_nodes, dtype=np.int64)
    for i in range(est.shape[0]):
        node = 0
        while left[node] != -1:
            if X[est[i], feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        leaf_of[i] = node
        leaf_count[node] += 1
    leaf_start = np.zeros(n_nodes, dtype=np.int64)
    acc = 0
    for node in range(n_nodes):
        leaf_start[node] = acc
        acc += leaf_count[node]
    fill = leaf_start.copy()
    leaf_samples = np.empty(est.shape[0], dtype=np.int64)
    for i in range(est.shape[0]):
        leaf_samples[fill[leaf_of[i]]] = est[i]
        fill[leaf_of[i]] += 1
    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        leaf_start,
        leaf_count,
        leaf_samples,
        struct,
        est,
    )


@njit(cache=True)
def apply_trees(X, tree_ptr, feature, threshold, left, right):
    """Global leaf node index of every row in every tree (m x B)."""
    m = X.shape[0]
    n_trees = tree_ptr.shape[0] - 1
    out = np.empty((m, n_trees), dtype=np.int64)
    for b in range(n_trees):
        off = tree_ptr[b]
        for i in range(m):
            node = 0
            while left[off + node] != -1:
                if X[i, feature[off + node]] <= threshold[off + node]:
                    node = left[off + node]
                else:
                    node = right[off + node]
            out[i, b] = off + node
    return out


@njit(cache=True)
def weight_matrix(leaves, leaf_start, leaf_count, leaf_samples, n_train):
    m, n_trees = leaves.shape
    alpha = np.zeros((m, n_train))
    used = np.zeros(m, dtype=np.int64)
    for i in range(m):
        for b in range(n_trees):
            node = leaves[i, b]
            c = leaf_count[node]
            if c == 0:
                continue
            used[i] += 1
            inv = 1.0 / c
            s = leaf_start[node]
            for t in range(s, s + c):
                alpha[i, leaf_samples[t]] += inv
        if used[i] > 0:
            for j in range(n_train):
                alpha[i, j] /= used[i]
    return alpha, used


@njit(cache=True)
def leaf_average(leaves, leaf_start, leaf_count, leaf_samples, values):
    """Average over contributing trees of leaf means of each column of ``values``."""
    m, n_trees = leaves.shape
    q = values.shape[1]
    out = np.zeros((m, q))
    used = np.zeros(m, dtype=np.int64)
    for i in range(m):
        for b in range(n_trees):
            node = leaves[i, b]
            c = leaf_count[node]
            if c == 0:
                continue
            used[i] += 1
            s = leaf_start[node]
            for j in range(q):
                acc = 0.0
                for t in range(s, s + c):
                    acc += values[leaf_samples[t], j]
                out[i, j] += acc / c
        if used[i] > 0:
            for j in range(q):
                out[i, j] /= used[i]
    return out, used
