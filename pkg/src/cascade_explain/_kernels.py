"""Hot loops: tree growth, routing, node sums and leaf-table traversal.

Every kernel exists twice, a numba ``@njit`` version and a vectorized
numpy version that performs the same floating-point operations in the
same order, so both backends grow identical trees. The numba path is
used when numba imports and ``CASCADE_EXPLAIN_DISABLE_NUMBA`` is unset
(or "0"). ``set_backend`` switches at runtime for tests and benchmarks.
"""

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

ENV_FLAG = "CASCADE_EXPLAIN_DISABLE_NUMBA"

MULTIPLICATIVE, ADDITIVE, PARTIAL = 0, 1, 2


def _env_disabled():
    return os.environ.get(ENV_FLAG, "0").strip().lower() not in ("", "0", "false", "no")


_use_numba = HAS_NUMBA and not _env_disabled()


def backend():
    """Name of the active backend, ``"numba"`` or ``"numpy"``."""
    return "numba" if _use_numba else "numpy"


def set_backend(name):
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not importable")
    _use_numba = name == "numba"


if HAS_NUMBA:
    njit = numba.njit(cache=True, nogil=True)
else:  # pragma: no cover
    def njit(f):
        return f


# --- counter-based uniforms (splitmix64 finalizer) -------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S11 = np.uint64(11)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_INV53 = 1.0 / 9007199254740992.0


@njit
def _mix64_nb(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit
def _uniform_nb(seed, node, j):
    z = _mix64_nb(seed + np.uint64(node) * _GOLDEN)
    z = _mix64_nb(z + np.uint64(j) * _M2 + _GOLDEN)
    return np.float64(z >> _S11) * _INV53


def _mix64_np(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def uniforms(seed, node, js):
    """Uniform [0, 1) draws keyed by ``(seed, node, j)`` for each ``j`` in ``js``."""
    base = _mix64_np(np.array([seed], dtype=np.uint64)
                     + np.array([node], dtype=np.uint64) * _GOLDEN)
    z = _mix64_np(base + np.asarray(js, dtype=np.uint64) * _M2 + _GOLDEN)
    return (z >> _S11).astype(np.float64) * _INV53


# --- tree growth ------------------------------------------------------------

@njit
def _grow_nb(X, Y, w, max_features, random_split, max_depth, min_split,
             min_leaf, seed):
    n, p = X.shape
    C = Y.shape[1]
    useed = np.uint64(seed)
    ns = 0
    for i in range(n):
        if w[i] > 0:
            ns += 1
    samples = np.empty(ns, np.int64)
    j = 0
    for i in range(n):
        if w[i] > 0:
            samples[j] = i
            j += 1
    cap = 2 * ns + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    count = np.zeros(cap)
    value = np.zeros((cap, C))
    depth = np.zeros(cap, np.int64)
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    end[0] = ns
    stack = np.empty(cap, np.int64)
    stack[0] = 0
    top = 1
    n_nodes = 1
    buf = np.empty(ns, np.int64)
    xs = np.empty(ns)
    mu = np.empty(C)
    sl = np.empty(C)
    u = np.empty(p)
    all_feats = np.arange(p)

    while top > 0:
        top -= 1
        nid = stack[top]
        s = start[nid]
        e = end[nid]
        m = e - s
        W = 0.0
        for c in range(C):
            mu[c] = 0.0
        for i in range(s, e):
            r = samples[i]
            W += w[r]
            for c in range(C):
                mu[c] += w[r] * Y[r, c]
        for c in range(C):
            mu[c] = mu[c] / W
            value[nid, c] = mu[c]
        count[nid] = W
        sse = 0.0
        for i in range(s, e):
            r = samples[i]
            for c in range(C):
                d = Y[r, c] - mu[c]
                sse += w[r] * (d * d)
        if ((max_depth >= 0 and depth[nid] >= max_depth) or W < min_split
                or W < 2 * min_leaf or sse <= 1e-12 * W):
            continue

        if max_features < p:
            for f in range(p):
                u[f] = _uniform_nb(useed, nid, f)
            cand = np.sort(np.argsort(u, kind="mergesort")[:max_features])
        else:
            cand = all_feats

        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        for f in cand:
            if random_split:
                lo = np.inf
                hi = -np.inf
                for i in range(s, e):
                    v = X[samples[i], f]
                    if v < lo:
                        lo = v
                    if v > hi:
                        hi = v
                if not hi > lo:
                    continue
                thr = lo + _uniform_nb(useed, nid, p + f) * (hi - lo)
                if thr <= lo:
                    continue
                wl = 0.0
                for c in range(C):
                    sl[c] = 0.0
                for i in range(s, e):
                    r = samples[i]
                    if X[r, f] < thr:
                        wl += w[r]
                        for c in range(C):
                            sl[c] += w[r] * (Y[r, c] - mu[c])
                wr = W - wl
                if wl < min_leaf or wr < min_leaf:
                    continue
                g = 0.0
                for c in range(C):
                    g += sl[c] * sl[c]
                g = g * W / (wl * wr)
                if g > best_gain:
                    best_gain = g
                    best_f = f
                    best_thr = thr
            else:
                for i in range(m):
                    xs[i] = X[samples[s + i], f]
                order = np.argsort(xs[:m], kind="mergesort")
                wl = 0.0
                for c in range(C):
                    sl[c] = 0.0
                for jj in range(m - 1):
                    r = samples[s + order[jj]]
                    wl += w[r]
                    for c in range(C):
                        sl[c] += w[r] * (Y[r, c] - mu[c])
                    a = xs[order[jj]]
                    b = xs[order[jj + 1]]
                    if a < b:
                        wr = W - wl
                        if wl >= min_leaf and wr >= min_leaf:
                            g = 0.0
                            for c in range(C):
                                g += sl[c] * sl[c]
                            g = g * W / (wl * wr)
                            if g > best_gain:
                                best_gain = g
                                best_f = f
                                thr = 0.5 * (a + b)
                                if thr <= a:
                                    thr = b
                                best_thr = thr
        if best_f < 0 or best_gain <= 1e-12 * sse:
            continue

        nl = 0
        nr = 0
        for i in range(s, e):
            r = samples[i]
            if X[r, best_f] < best_thr:
                samples[s + nl] = r
                nl += 1
            else:
                buf[nr] = r
                nr += 1
        for i in range(nr):
            samples[s + nl + i] = buf[i]
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[nid] = best_f
        threshold[nid] = best_thr
        left[nid] = lc
        right[nid] = rc
        start[lc] = s
        end[lc] = s + nl
        start[rc] = s + nl
        end[rc] = e
        depth[lc] = depth[nid] + 1
        depth[rc] = depth[nid] + 1
        stack[top] = rc
        top += 1
        stack[top] = lc
        top += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], count[:n_nodes], value[:n_nodes],
            depth[:n_nodes])


def _last(a, axis=0):
    # sequential left-to-right sum, matching the numba accumulation order
    return np.cumsum(a, axis=axis)[-1]


def _grow_np(X, Y, w, max_features, random_split, max_depth, min_split,
             min_leaf, seed):
    n, p = X.shape
    C = Y.shape[1]
    samples = np.flatnonzero(w > 0).astype(np.int64)
    ns = samples.size
    cap = 2 * ns + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    count = np.zeros(cap)
    value = np.zeros((cap, C))
    depth = np.zeros(cap, np.int64)
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    end[0] = ns
    stack = [0]
    n_nodes = 1
    all_feats = np.arange(p)

    while stack:
        nid = stack.pop()
        s, e = start[nid], end[nid]
        seg = samples[s:e]
        ws = w[seg]
        Ys = Y[seg]
        W = _last(ws)
        mu = _last(ws[:, None] * Ys) / W
        value[nid] = mu
        count[nid] = W
        dev = Ys - mu
        sse = _last((ws[:, None] * (dev * dev)).ravel())
        if ((max_depth >= 0 and depth[nid] >= max_depth) or W < min_split
                or W < 2 * min_leaf or sse <= 1e-12 * W):
            continue

        if max_features < p:
            u = uniforms(seed, nid, all_feats)
            cand = np.sort(np.argsort(u, kind="stable")[:max_features])
        else:
            cand = all_feats
        wdev = ws[:, None] * dev

        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        if random_split:
            us = uniforms(seed, nid, p + cand)
        with np.errstate(divide="ignore", invalid="ignore"):
            for ci, f in enumerate(cand):
                xs = X[seg, f]
                if random_split:
                    lo = xs.min()
                    hi = xs.max()
                    if not hi > lo:
                        continue
                    thr = lo + us[ci] * (hi - lo)
                    if thr <= lo:
                        continue
                    mask = xs < thr
                    if not mask.any():
                        continue
                    wl = _last(ws[mask])
                    slv = _last(wdev[mask])
                    wr = W - wl
                    if wl < min_leaf or wr < min_leaf:
                        continue
                    g = _last(slv * slv) * W / (wl * wr)
                    if g > best_gain:
                        best_gain, best_f, best_thr = g, f, thr
                else:
                    order = np.argsort(xs, kind="stable")
                    xo = xs[order]
                    wl = np.cumsum(ws[order])[:-1]
                    slv = np.cumsum(wdev[order], axis=0)[:-1]
                    wr = W - wl
                    ok = (xo[:-1] < xo[1:]) & (wl >= min_leaf) & (wr >= min_leaf)
                    if not ok.any():
                        continue
                    g = np.cumsum(slv * slv, axis=1)[:, -1] * W / (wl * wr)
                    g = np.where(ok, g, -np.inf)
                    jj = int(np.argmax(g))
                    if g[jj] > best_gain:
                        a, b = xo[jj], xo[jj + 1]
                        thr = 0.5 * (a + b)
                        if thr <= a:
                            thr = b
                        best_gain, best_f, best_thr = g[jj], f, thr
        if best_f < 0 or best_gain <= 1e-12 * sse:
            continue

        mask = X[seg, best_f] < best_thr
        nl = int(mask.sum())
        samples[s:e] = np.concatenate([seg[mask], seg[~mask]])
        lc, rc = n_nodes, n_nodes + 1
        n_nodes += 2
        feature[nid] = best_f
        threshold[nid] = best_thr
        left[nid] = lc
        right[nid] = rc
        start[lc], end[lc] = s, s + nl
        start[rc], end[rc] = s + nl, e
        depth[lc] = depth[rc] = depth[nid] + 1
        stack.append(rc)
        stack.append(lc)

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], count[:n_nodes], value[:n_nodes],
            depth[:n_nodes])


def grow(X, Y, w, max_features, random_split, max_depth, min_split,
         min_leaf, seed):
    """Grow one tree; returns the node arrays
    ``(feature, threshold, left, right, count, value, depth)``.

    ``max_depth < 0`` means unlimited. ``seed`` is a 64-bit stream key.
    """
    fn = _grow_nb if _use_numba else _grow_np
    return fn(X, Y, w, int(max_features), bool(random_split), int(max_depth),
              float(min_split), float(min_leaf), np.uint64(seed))


# --- routing ----------------------------------------------------------------

@njit
def _apply_nb(feature, threshold, left, right, X):
    n = X.shape[0]
    out = np.empty(n, np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


def _apply_np(feature, threshold, left, right, X):
    node = np.zeros(X.shape[0], np.int64)
    active = np.flatnonzero(feature[node] >= 0)
    while active.size:
        nd = node[active]
        go_left = X[active, feature[nd]] < threshold[nd]
        node[active] = np.where(go_left, left[nd], right[nd])
        active = active[feature[node[active]] >= 0]
    return node


def apply(feature, threshold, left, right, X):
    """Leaf node id reached by each row of ``X``."""
    fn = _apply_nb if _use_numba else _apply_np
    return fn(feature, threshold, left, right, X)


# --- per-node sums of row statistics ----------------------------------------

@njit
def _node_sums_nb(leaf_of_row, w, P, left, right, n_nodes):
    D = P.shape[1]
    sums = np.zeros((n_nodes, D))
    for i in range(leaf_of_row.shape[0]):
        wi = w[i]
        if wi == 0:
            continue
        lf = leaf_of_row[i]
        for d in range(D):
            sums[lf, d] += wi * P[i, d]
    for nid in range(n_nodes - 1, -1, -1):
        lc = left[nid]
        if lc >= 0:
            rc = right[nid]
            for d in range(D):
                sums[nid, d] = sums[lc, d] + sums[rc, d]
    return sums


def _node_sums_np(leaf_of_row, w, P, left, right, n_nodes):
    sums = np.zeros((n_nodes, P.shape[1]))
    keep = w != 0
    np.add.at(sums, leaf_of_row[keep], w[keep, None] * P[keep])
    for nid in np.flatnonzero(left >= 0)[::-1]:
        sums[nid] = sums[left[nid]] + sums[right[nid]]
    return sums


def node_sums(leaf_of_row, w, P, left, right):
    """Weighted sums of the rows of ``P`` over each node's training members."""
    fn = _node_sums_nb if _use_numba else _node_sums_np
    return fn(leaf_of_row, w, P, left, right, left.shape[0])


# --- calibration and leaf-table traversal ------------------------------------

@njit
def _calibrate_nb(est, dtrue, method, eps):
    K, C = est.shape
    out = est.copy()
    for c in range(C):
        d = dtrue[c]
        if d == 0.0:
            for k in range(K):
                out[k, c] = 0.0
            continue
        sh = 0.0
        for k in range(K):
            sh += est[k, c]
        resid = d - sh
        uniform = False
        if method == MULTIPLICATIVE:
            if abs(sh) < eps:
                uniform = True
            else:
                scale = d / sh
                for k in range(K):
                    out[k, c] = est[k, c] * scale
        elif method == ADDITIVE:
            sa = 0.0
            for k in range(K):
                sa += abs(est[k, c])
            if sa < eps:
                uniform = True
            else:
                for k in range(K):
                    out[k, c] = est[k, c] + abs(est[k, c]) / sa * resid
        else:
            ss = 0.0
            any_s = False
            for k in range(K):
                h = est[k, c]
                if (h > 0.0 and d > 0.0) or (h < 0.0 and d < 0.0):
                    ss += h
                    any_s = True
            if not any_s or abs(ss) < eps:
                uniform = True
            else:
                factor = 1.0 + resid / ss
                for k in range(K):
                    h = est[k, c]
                    if (h > 0.0 and d > 0.0) or (h < 0.0 and d < 0.0):
                        out[k, c] = h * factor
        if uniform:
            share = resid / K
            for k in range(K):
                out[k, c] = est[k, c] + share
    return out


@njit
def _node_tables_nb(feature, left, right, count, value, sums, src, K,
                    method, eps):
    n_nodes, C = value.shape
    acc = np.zeros((n_nodes, K, C))
    dtrue = np.empty(C)
    est = np.empty((K, C))
    max_res = 0.0
    for t in range(n_nodes):
        f = feature[t]
        if f < 0:
            continue
        for side in range(2):
            ch = left[t] if side == 0 else right[t]
            for c in range(C):
                dtrue[c] = value[ch, c] - value[t, c]
            for k in range(K):
                for c in range(C):
                    acc[ch, k, c] = acc[t, k, c]
            if f < K:
                for c in range(C):
                    acc[ch, f, c] += dtrue[c]
            else:
                src_f = src[f]
                for k in range(K):
                    for c in range(C):
                        est[k, c] = (sums[ch, src_f, k, c] / count[ch]
                                     - sums[t, src_f, k, c] / count[t])
                cal = _calibrate_nb(est, dtrue, method, eps)
                for c in range(C):
                    tot = 0.0
                    for k in range(K):
                        acc[ch, k, c] += cal[k, c]
                        tot += cal[k, c]
                    res = abs(tot - dtrue[c])
                    if res > max_res:
                        max_res = res
    return acc, max_res


def _node_tables_np(feature, left, right, count, value, sums, src, K,
                    method, eps, calibrate_fn):
    n_nodes, C = value.shape
    acc = np.zeros((n_nodes, K, C))
    max_res = 0.0
    for t in np.flatnonzero(feature >= 0):
        f = feature[t]
        for ch in (left[t], right[t]):
            dtrue = value[ch] - value[t]
            acc[ch] = acc[t]
            if f < K:
                acc[ch, f] += dtrue
            else:
                g = src[f]
                est = sums[ch, g] / count[ch] - sums[t, g] / count[t]
                cal = calibrate_fn(est, dtrue, method, eps)
                acc[ch] += cal
                max_res = max(max_res, float(np.max(np.abs(_last(cal) - dtrue))))
    return acc, max_res


def node_tables(feature, left, right, count, value, sums, src, K, method,
                eps, calibrate_fn):
    """Accumulated per-node contribution tables, shape ``(n_nodes, K, C)``.

    Splits on features ``< K`` add the true response change to that
    feature's row. Splits on a feature ``f >= K`` estimate per-feature
    deltas from ``sums[:, src[f]]`` and calibrate them with ``method``.
    Also returns the largest calibration-constraint residual seen.
    """
    if _use_numba:
        return _node_tables_nb(feature, left, right, count, value, sums, src,
                               int(K), int(method), float(eps))
    return _node_tables_np(feature, left, right, count, value, sums, src, K,
                           method, eps, calibrate_fn)
