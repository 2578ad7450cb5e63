"""Numba-compiled kernels mirroring ``_kernels_numpy`` operation for operation.

Import this module only when numba is installed; ``accel.get_kernels``
handles the selection.  Trees must come out bit-identical to the numpy path:
split gains use the same float expressions evaluated in the same order, and
the per-node feature subsets share one splitmix64 stream keyed by
(seed, heap id) so they never depend on row order.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _splitmix(state):
    state = state + _GOLD
    z = state
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return state, z ^ (z >> np.uint64(31))


@njit(cache=True)
def _feature_subset(n_features, n_sub, seed, heap_id, pool):
    if n_sub >= n_features:
        for i in range(n_features):
            pool[i] = i
        return n_features
    for i in range(n_features):
        pool[i] = i
    state = np.uint64(seed) ^ (np.uint64(heap_id) * _GOLD)
    for i in range(n_sub):
        state, h = _splitmix(state)
        j = i + np.int64(h % np.uint64(n_features - i))
        tmp = pool[i]
        pool[i] = pool[j]
        pool[j] = tmp
    return n_sub


@njit(cache=True)
def _leaf_quantile(resid, tau):
    # Lower empirical quantile: exact pinball minimizer over the leaf.
    r = np.sort(resid)
    n = r.shape[0]
    k = int(np.ceil(n * tau)) - 1
    if k < 0:
        k = 0
    return r[k]


@njit(cache=True)
def grow_tree(X, g01, resid, tau, max_depth, min_split, min_leaf, n_sub, seed):
    n, p = X.shape
    cap = 2 ** (max_depth + 1) - 1
    feature = np.full(cap, -1, dtype=np.int32)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    value = np.zeros(cap, dtype=np.float64)

    rows = np.arange(n, dtype=np.int64)
    scratch = np.empty(n, dtype=np.int64)
    pool = np.empty(p, dtype=np.int64)
    vals = np.empty(n, dtype=np.float64)
    gbuf = np.empty(n, dtype=np.uint8)
    rbuf = np.empty(n, dtype=np.float64)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_heap = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    stack_lo = np.empty(cap, dtype=np.int64)
    stack_hi = np.empty(cap, dtype=np.int64)

    n_nodes = 1
    top = 0
    stack_node[0] = 0
    stack_heap[0] = 1
    stack_depth[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    while top >= 0:
        node = stack_node[top]
        heap_id = stack_heap[top]
        depth = stack_depth[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        top -= 1

        n_node = hi - lo
        c_all = 0
        for i in range(lo, hi):
            c_all += g01[rows[i]]
        s_all = n_node * tau - c_all
        base = s_all * s_all / n_node

        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        can_split = (
            depth < max_depth
            and n_node >= min_split
            and n_node >= 2 * min_leaf
            and 0 < c_all < n_node
        )
        if can_split:
            n_used = _feature_subset(p, n_sub, seed, heap_id, pool)
            for fi in range(n_used):
                f = pool[fi]
                for i in range(n_node):
                    vals[i] = X[rows[lo + i], f]
                order = np.argsort(vals[:n_node])
                for i in range(n_node):
                    gbuf[i] = g01[rows[lo + order[i]]]
                c_run = 0
                prev = vals[order[0]]
                for k in range(1, n_node):
                    c_run += gbuf[k - 1]
                    cur = vals[order[k]]
                    if (
                        cur > prev
                        and k >= min_leaf
                        and n_node - k >= min_leaf
                    ):
                        kf = np.float64(k)
                        s_l = kf * tau - c_run
                        s_r = s_all - s_l
                        gain = s_l * s_l / kf + s_r * s_r / (n_node - kf) - base
                        if gain > best_gain:
                            best_gain = gain
                            best_f = f
                            best_thr = 0.5 * (prev + cur)
                    prev = cur
        if best_f < 0:
            for i in range(n_node):
                rbuf[i] = resid[rows[lo + i]]
            value[node] = _leaf_quantile(rbuf[:n_node].copy(), tau)
            continue

        feature[node] = best_f
        threshold[node] = best_thr
        n_left = 0
        for i in range(lo, hi):
            if X[rows[i], best_f] <= best_thr:
                n_left += 1
        wl = lo
        wr = lo + n_left
        for i in range(lo, hi):
            r = rows[i]
            if X[r, best_f] <= best_thr:
                scratch[wl] = r
                wl += 1
            else:
                scratch[wr] = r
                wr += 1
        for i in range(lo, hi):
            rows[i] = scratch[i]
        mid = lo + n_left
        li = n_nodes
        ri = n_nodes + 1
        n_nodes += 2
        left[node] = li
        right[node] = ri
        top += 1
        stack_node[top] = ri
        stack_heap[top] = 2 * heap_id + 1
        stack_depth[top] = depth + 1
        stack_lo[top] = mid
        stack_hi[top] = hi
        top += 1
        stack_node[top] = li
        stack_heap[top] = 2 * heap_id
        stack_depth[top] = depth + 1
        stack_lo[top] = lo
        stack_hi[top] = mid
    return feature, threshold, left, right, value, n_nodes


@njit(cache=True)
def apply_tree(feature, threshold, left, right, value, X):
    n = X.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True, inline="always")
def _phi(z):
    return 0.5 * math.erfc(-z * math.sqrt(0.5))


@njit(cache=True, inline="always")
def _beta_lookup_scalar(u, btab_lo, btab_hi):
    # Cell index from the graded coordinate, interpolation weight linear in
    # u so the identity transform stays exact.
    K = btab_lo.shape[0]
    if u <= 0.5:
        s = (2.0 * u) ** (1.0 / 3.0)
        j = int(s * (K - 1))
        if j > K - 2:
            j = K - 2
        u_j = 0.5 * (j / (K - 1.0)) ** 3
        u_j1 = 0.5 * ((j + 1) / (K - 1.0)) ** 3
        t = (u - u_j) / (u_j1 - u_j)
        return btab_lo[j] + t * (btab_lo[j + 1] - btab_lo[j])
    v = 1.0 - u
    s = (2.0 * v) ** (1.0 / 3.0)
    j = int(s * (K - 1))
    if j > K - 2:
        j = K - 2
    u_j = 0.5 * (j / (K - 1.0)) ** 3
    u_j1 = 0.5 * ((j + 1) / (K - 1.0)) ** 3
    t = (v - u_j) / (u_j1 - u_j)
    return 1.0 - (btab_hi[j] + t * (btab_hi[j + 1] - btab_hi[j]))


@njit(cache=True)
def pool_crps_batch(mu, iqr, y, lam0, lam1, btab_lo, btab_hi, grid_n):
    n, m = mu.shape
    h = 1.0 / (grid_n - 1)
    xs = np.linspace(0.0, 1.0, grid_n)
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        yi = y[i]
        # Cell with x_l < y <= x_r, robust when y lands exactly on a knot.
        j_y = np.searchsorted(xs, yi) - 1
        if j_y > grid_n - 2:
            j_y = grid_n - 2
        if j_y < 0:
            j_y = 0
        total = 0.0
        d_prev = 0.0
        b_lcell = 0.0
        b_rcell = 0.0
        for g in range(grid_n):
            x = xs[g]
            acc = 0.0
            for k in range(m):
                sig = lam0 + lam1 * iqr[i, k]
                acc += _phi((x - mu[i, k]) / sig)
            b = _beta_lookup_scalar(acc / m, btab_lo, btab_hi)
            if x >= yi:
                d = (b - 1.0) * (b - 1.0)
            else:
                d = b * b
            if g > 0:
                total += 0.5 * h * (d_prev + d)
            if g == j_y:
                b_lcell = b
            elif g == j_y + 1:
                b_rcell = b
            d_prev = d
        x_l = xs[j_y]
        x_r = xs[j_y + 1]
        acc = 0.0
        for k in range(m):
            sig = lam0 + lam1 * iqr[i, k]
            acc += _phi((yi - mu[i, k]) / sig)
        b_y = _beta_lookup_scalar(acc / m, btab_lo, btab_hi)
        if x_l >= yi:
            d_l = (b_lcell - 1.0) * (b_lcell - 1.0)
        else:
            d_l = b_lcell * b_lcell
        if x_r >= yi:
            d_r = (b_rcell - 1.0) * (b_rcell - 1.0)
        else:
            d_r = b_rcell * b_rcell
        old_cell = 0.5 * h * (d_l + d_r)
        new_cell = 0.5 * (yi - x_l) * (b_lcell * b_lcell + b_y * b_y) + 0.5 * (
            x_r - yi
        ) * ((b_y - 1.0) * (b_y - 1.0) + (b_rcell - 1.0) * (b_rcell - 1.0))
        out[i] = total - old_cell + new_cell
    return out


__all__ = [
    "apply_tree",
    "grow_tree",
    "pool_crps_batch",
]
