"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures, same split order and the same floating point expression
order, so a tree grown here matches the compiled one node for node.
"""
import numpy as np

_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & _MASK64

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


def build_tree(Xt, y, counts, max_depth, min_samples_leaf, mtry, w0, w1, seed):
    X = np.asarray(Xt, dtype=np.float64).T
    y = np.asarray(y, dtype=np.int8)
    counts = np.asarray(counts, dtype=np.int64)
    n, d = X.shape
    idx = np.flatnonzero(counts > 0).astype(np.int64)
    m = idx.size
    if m == 0:
        raise ValueError("empty bootstrap sample")
    if mtry < 1 or mtry > d:
        raise ValueError("mtry must be in [1, n_features]")

    cap = 2 * m + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    n0 = np.zeros(cap, dtype=np.int64)
    n1 = np.zeros(cap, dtype=np.int64)
    dec = np.zeros(cap)

    rng = SplitMix64(seed)
    pos = (y == 1)
    c1_all = int(counts[idx][pos[idx]].sum())
    c0_all = int(counts[idx].sum()) - c1_all
    root_w = c0_all * w0 + c1_all * w1

    stack = [(0, idx, 0)]
    n_nodes = 1
    while stack:
        node, members, depth = stack.pop()
        cnt = counts[members]
        is1 = pos[members]
        c1 = int(cnt[is1].sum())
        c0 = int(cnt.sum()) - c1
        n0[node] = c0
        n1[node] = c1
        if c0 == 0 or c1 == 0:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue
        if c0 + c1 < 2 * min_samples_leaf:
            continue

        W0 = c0 * w0
        W1 = c1 * w1
        parent = W0 * W1 / (W0 + W1)
        best = parent
        best_f = -1
        best_thr = 0.0

        feats = list(range(d))
        for j in range(mtry):
            k = j + rng.next() % (d - j)
            feats[j], feats[k] = feats[k], feats[j]

        for f in feats[:mtry]:
            vals = X[members, f]
            order = np.argsort(vals, kind="stable")
            sv = vals[order]
            sc = cnt[order]
            s1 = is1[order]
            l1 = np.cumsum(np.where(s1, sc, 0))[:-1]
            l0 = np.cumsum(np.where(s1, 0, sc))[:-1]
            ok = sv[:-1] < sv[1:]
            ok &= (l0 + l1) >= min_samples_leaf
            ok &= ((c0 - l0) + (c1 - l1)) >= min_samples_leaf
            if not ok.any():
                continue
            cand = np.flatnonzero(ok)
            wl0 = l0[cand] * w0
            wl1 = l1[cand] * w1
            wr0 = (c0 - l0[cand]) * w0
            wr1 = (c1 - l1[cand]) * w1
            proxy = wl0 * wl1 / (wl0 + wl1) + wr0 * wr1 / (wr0 + wr1)
            at = int(np.argmin(proxy))
            if proxy[at] < best:
                best = float(proxy[at])
                best_f = f
                i = cand[at]
                best_thr = float(sv[i])

        if best_f < 0:
            continue
        go_left = X[members, best_f] <= best_thr
        feature[node] = best_f
        threshold[node] = best_thr
        dec[node] = 2.0 * (parent - best) / root_w
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack.append((n_nodes + 1, members[~go_left], depth + 1))
        stack.append((n_nodes, members[go_left], depth + 1))
        n_nodes += 2

    sl = slice(0, n_nodes)
    return (feature[sl].copy(), threshold[sl].copy(), left[sl].copy(),
            right[sl].copy(), n0[sl].copy(), n1[sl].copy(), dec[sl].copy())


def apply_tree(X, feature, threshold, left, right):
    X = np.asarray(X, dtype=np.float64)
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    active = feature[node] >= 0
    while active.any():
        r = rows[active]
        nd = node[r]
        go_left = X[r, feature[nd]] <= threshold[nd]
        node[r] = np.where(go_left, left[nd], right[nd])
        active = feature[node] >= 0
    return node


def im2col(x, k, stride, pad, ho, wo):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, ho, wo))
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                                    kj:kj + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im(cols, C, H, W, k, stride, pad, ho, wo):
    n = cols.shape[0]
    cols = cols.reshape(n, C, k, k, ho, wo)
    # room for windows that run past the padded border
    hp = max(H + 2 * pad, stride * (ho - 1) + k)
    wp = max(W + 2 * pad, stride * (wo - 1) + k)
    out = np.zeros((n, C, hp, wp))
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                kj:kj + stride * (wo - 1) + 1:stride] += cols[:, :, ki, kj]
    return np.ascontiguousarray(out[:, :, pad:pad + H, pad:pad + W])


def _box_sum(a, r):
    h, w = a.shape
    p = np.zeros((h + 2 * r + 1, w + 2 * r + 1))
    p[r + 1:r + 1 + h, r + 1:r + 1 + w] = a
    s = p.cumsum(0).cumsum(1)
    k = 2 * r + 1
    return s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]


def lk_solve(ix, iy, it, window, tau):
    r = window // 2
    sxx = _box_sum(ix * ix, r)
    sxy = _box_sum(ix * iy, r)
    syy = _box_sum(iy * iy, r)
    sxt = _box_sum(ix * it, r)
    syt = _box_sum(iy * it, r)
    tr = sxx + syy
    det = sxx * syy - sxy * sxy
    disc = (sxx - syy) ** 2 + 4.0 * sxy * sxy
    lmin = 0.5 * (tr - np.sqrt(disc))
    valid = lmin >= tau
    safe = np.where(valid, det, 1.0)
    u = np.where(valid, (-syy * sxt + sxy * syt) / safe, 0.0)
    v = np.where(valid, (sxy * sxt - sxx * syt) / safe, 0.0)
    return u, v, valid
