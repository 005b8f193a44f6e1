"""Compiled inner loops for regression-tree growth and routing."""

import numba
import numpy as np

# A candidate only replaces the incumbent if it beats it by this fraction of
# the node SSE; keeps tie-breaking stable under float noise.
TIE_RTOL = 1e-10
# Minimum admissible gain relative to the node's sum of squared targets.
GAIN_RTOL = 1e-12


@numba.njit(cache=True, nogil=True)
def _scan_sorted(vals, tgt, nm, sm, n_total, sum_total, min_leaf, sse_node,
                 sumsq, best):
    """Scan one feature's candidate splits, updating ``best`` in place.

    ``vals``/``tgt`` are the observed values (ascending) and their targets;
    ``nm``/``sm`` count and sum the targets of rows missing this feature.
    ``best`` holds (gain, threshold, missing_left). Candidates are visited in
    tie-break order: ascending threshold, missing->left first, then the
    observed-vs-missing split. Returns True if ``best`` was replaced.
    """
    no = vals.shape[0]
    tol = TIE_RTOL * sse_node
    floor = GAIN_RTOL * sumsq
    replaced = False
    sl = 0.0
    for k in range(no - 1):
        sl += tgt[k]
        if not vals[k] < vals[k + 1]:
            continue
        thr = 0.5 * (vals[k] + vals[k + 1])
        if thr >= vals[k + 1]:
            thr = vals[k]
        nl = k + 1
        for direction in range(2):
            if direction == 0:
                nL = nl + nm
                sL = sl + sm
            else:
                if nm == 0:
                    continue
                nL = nl
                sL = sl
            nR = n_total - nL
            if nL < min_leaf or nR < min_leaf:
                continue
            sR = sum_total - sL
            d = sL / nL - sR / nR
            gain = nL * nR / n_total * d * d
            if gain > floor and gain > best[0] + tol:
                best[0] = gain
                best[1] = thr
                best[2] = 1.0 if direction == 0 else 0.0
                replaced = True
    if nm > 0 and no > 0 and no >= min_leaf and nm >= min_leaf:
        d = (sum_total - sm) / no - sm / nm
        gain = no * nm / n_total * d * d
        if gain > floor and gain > best[0] + tol:
            best[0] = gain
            best[1] = np.inf
            best[2] = 0.0
            replaced = True
    return replaced


@numba.njit(cache=True, nogil=True)
def _node_stats(ts):
    n = ts.shape[0]
    s = 0.0
    sumsq = 0.0
    for i in range(n):
        s += ts[i]
        sumsq += ts[i] * ts[i]
    mean = s / n
    sse = 0.0
    for i in range(n):
        sse += (ts[i] - mean) ** 2
    return s, sumsq, sse


@numba.njit(cache=True, nogil=True)
def best_split_column(x, y, min_leaf):
    """Best split of one feature column. Returns (found, threshold,
    missing_left, gain)."""
    n = x.shape[0]
    best = np.zeros(3)
    if n < 2 or n < 2 * min_leaf:
        return False, 0.0, True, 0.0
    s, sumsq, sse = _node_stats(y)
    miss = np.isnan(x)
    nm = 0
    sm = 0.0
    for i in range(n):
        if miss[i]:
            nm += 1
            sm += y[i]
    obs = np.flatnonzero(~miss)
    order = obs[np.argsort(x[obs], kind="mergesort")]
    found = _scan_sorted(x[order], y[order], nm, sm, n, s, min_leaf, sse,
                         sumsq, best)
    return found, best[1], best[2] > 0.5, best[0]


@numba.njit(cache=True, nogil=True)
def grow_tree(X, y, order, rows, keys, max_depth, min_leaf, m):
    """Grow a regression tree depth-first over the sample ``rows``.

    ``rows`` may repeat indices (bootstrap draws). ``keys`` carries one row
    of random priorities per node id; the ``m`` lowest-priority features are
    the split candidates. An empty ``keys`` means every feature is a
    candidate. ``max_depth < 0`` means unlimited.

    ``order[f]`` lists all rows of ``X`` by ascending value of feature ``f``
    with missing values at the tail (see ``feature_order``). Each node owns
    the segment [start, end) of every per-feature sorted position list, so
    no sorting happens during growth.
    """
    n = rows.shape[0]
    d = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    missing_left = np.ones(cap, dtype=np.bool_)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int64)
    leaf_of = np.empty(n, dtype=np.int64)

    Xs = np.empty((d, n))
    ys = np.empty(n)
    for j in range(n):
        ys[j] = y[rows[j]]
        for f in range(d):
            Xs[f, j] = X[rows[j], f]
    # expand the per-row value order to sample positions (rows may repeat)
    n_rows = X.shape[0]
    offsets = np.zeros(n_rows + 1, dtype=np.int64)
    for j in range(n):
        offsets[rows[j] + 1] += 1
    for r in range(n_rows):
        offsets[r + 1] += offsets[r]
    fill = offsets[:-1].copy()
    by_row = np.empty(n, dtype=np.int64)
    for j in range(n):
        by_row[fill[rows[j]]] = j
        fill[rows[j]] += 1
    sorted_pos = np.empty((d, n), dtype=np.int64)
    for f in range(d):
        k = 0
        for r in order[f]:
            for q in range(offsets[r], offsets[r + 1]):
                sorted_pos[f, k] = by_row[q]
                k += 1

    goes_left = np.zeros(n, dtype=np.bool_)
    buf = np.empty(n, dtype=np.int64)
    all_features = np.arange(d)
    sample_keys = keys.shape[0] > 0
    best = np.zeros(3)
    vals = np.empty(n)
    tgt = np.empty(n)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n
    stack_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]
        size = end - start
        # feature-0 value order makes node sums independent of row order
        seg = sorted_pos[0, start:end]
        s, sumsq, sse = _node_stats(ys[seg])
        value[node] = s / size
        count[node] = size

        best_f = -1
        if (max_depth < 0 or depth < max_depth) and size >= 2 * min_leaf and size >= 2:
            if sample_keys:
                cand = np.sort(np.argsort(keys[node])[:m])
            else:
                cand = all_features
            best[:] = 0.0
            for f in cand:
                no = 0
                nm = 0
                sm = 0.0
                for i in range(start, end):
                    p = sorted_pos[f, i]
                    v = Xs[f, p]
                    if np.isnan(v):
                        nm += 1
                        sm += ys[p]
                    else:
                        vals[no] = v
                        tgt[no] = ys[p]
                        no += 1
                if _scan_sorted(vals[:no], tgt[:no], nm, sm, size, s, min_leaf,
                                sse, sumsq, best):
                    best_f = f
        if best_f < 0:
            for p in seg:
                leaf_of[p] = node
            continue

        thr = best[1]
        mleft = best[2] > 0.5
        nl = 0
        for p in seg:
            v = Xs[best_f, p]
            if np.isnan(v):
                goes_left[p] = mleft
            else:
                goes_left[p] = v <= thr
            if goes_left[p]:
                nl += 1
        # stable partition of every feature's sorted segment
        for f in range(d):
            a = 0
            b = nl
            for i in range(start, end):
                p = sorted_pos[f, i]
                if goes_left[p]:
                    buf[a] = p
                    a += 1
                else:
                    buf[b] = p
                    b += 1
            for i in range(size):
                sorted_pos[f, start + i] = buf[i]

        feature[node] = best_f
        threshold[node] = thr
        missing_left[node] = mleft
        gain[node] = best[0]
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        # right pushed first so the left subtree is grown first
        stack_node[top] = rc
        stack_start[top] = start + nl
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lc
        stack_start[top] = start
        stack_end[top] = start + nl
        stack_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes], threshold[:n_nodes], missing_left[:n_nodes],
            left[:n_nodes], right[:n_nodes], value[:n_nodes], gain[:n_nodes],
            count[:n_nodes], leaf_of)


def feature_order(X):
    """Stable per-feature row order, NaN last; shared by all trees on ``X``."""
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)


@numba.njit(cache=True, nogil=True)
def apply_tree(X, feature, threshold, missing_left, left, right):
    """Leaf id reached by every row of ``X``."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            x = X[i, feature[node]]
            if np.isnan(x):
                go_left = missing_left[node]
            else:
                go_left = x <= threshold[node]
            node = left[node] if go_left else right[node]
        out[i] = node
    return out
