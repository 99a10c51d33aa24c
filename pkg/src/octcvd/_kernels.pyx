# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Every function here has a numpy twin in ``_fallback`` with the same
signature and the same arithmetic order, so both backends build identical
trees and identical im2col buffers.
"""
import numpy as np

from libc.stdint cimport uint64_t, int64_t
from libc.stdlib cimport malloc, free
from libc.math cimport sqrt, log2


cdef inline void _swap(double* v, int64_t* p, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef double tv = v[i]
    cdef int64_t tp = p[i]
    v[i] = v[j]
    p[i] = p[j]
    v[j] = tv
    p[j] = tp


cdef inline double _median3(double* v, Py_ssize_t n) noexcept nogil:
    cdef double a = v[0]
    cdef double b = v[n // 2]
    cdef double c = v[n - 1]
    if a < b:
        if b < c:
            return b
        elif a < c:
            return c
        return a
    if a < c:
        return a
    elif b < c:
        return c
    return b


cdef void _sift_down(double* v, int64_t* p, Py_ssize_t start, Py_ssize_t end) noexcept nogil:
    cdef Py_ssize_t child, maxind, root = start
    while True:
        child = root * 2 + 1
        maxind = root
        if child < end and v[maxind] < v[child]:
            maxind = child
        if child + 1 < end and v[maxind] < v[child + 1]:
            maxind = child + 1
        if maxind == root:
            return
        _swap(v, p, root, maxind)
        root = maxind


cdef void _heapsort(double* v, int64_t* p, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t start = (n - 2) // 2
    cdef Py_ssize_t end
    while True:
        _sift_down(v, p, start, n)
        if start == 0:
            break
        start -= 1
    end = n - 1
    while end > 0:
        _swap(v, p, 0, end)
        _sift_down(v, p, 0, end)
        end -= 1


cdef void _introsort(double* v, int64_t* p, Py_ssize_t n, int maxd) noexcept nogil:
    # three-way partition quicksort; ties only reorder equal keys
    cdef double pivot
    cdef Py_ssize_t i, l, r
    cdef double tv
    cdef int64_t tp
    while n > 1:
        if n <= 16:
            for i in range(1, n):
                tv = v[i]
                tp = p[i]
                l = i
                while l > 0 and v[l - 1] > tv:
                    v[l] = v[l - 1]
                    p[l] = p[l - 1]
                    l -= 1
                v[l] = tv
                p[l] = tp
            return
        if maxd <= 0:
            _heapsort(v, p, n)
            return
        maxd -= 1
        pivot = _median3(v, n)
        i = 0
        l = 0
        r = n
        while i < r:
            if v[i] < pivot:
                _swap(v, p, i, l)
                i += 1
                l += 1
            elif v[i] > pivot:
                r -= 1
                _swap(v, p, i, r)
            else:
                i += 1
        _introsort(v, p, l, maxd)
        v += r
        p += r
        n -= r


cdef inline uint64_t _splitmix_next(uint64_t* state) noexcept nogil:
    cdef uint64_t z
    state[0] = state[0] + <uint64_t>0x9E3779B97F4A7C15
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EB
    return z ^ (z >> 31)


def build_tree(const double[:, ::1] Xt, const signed char[::1] y,
               const int64_t[::1] counts, int max_depth, int min_samples_leaf,
               int mtry, double w0, double w1, uint64_t seed):
    """Grow one Gini tree on the rows with ``counts > 0``.

    ``Xt`` is the feature-major (n_features, n_rows) matrix. Returns
    ``(feature, threshold, left, right, n0, n1, decrease)`` trimmed to the
    number of nodes. Leaves have ``feature == -1``. ``threshold`` holds the
    largest value sent left; callers widen it to a midpoint.
    """
    cdef Py_ssize_t n = Xt.shape[1]
    cdef Py_ssize_t d = Xt.shape[0]
    cdef Py_ssize_t m = 0
    cdef Py_ssize_t i, j, k
    for i in range(n):
        if counts[i] > 0:
            m += 1
    if m == 0:
        raise ValueError("empty bootstrap sample")
    if mtry < 1 or mtry > d:
        raise ValueError("mtry must be in [1, n_features]")

    idx_arr = np.empty(m, dtype=np.int64)
    cdef int64_t[::1] idx = idx_arr
    j = 0
    for i in range(n):
        if counts[i] > 0:
            idx[j] = i
            j += 1

    cdef Py_ssize_t cap = 2 * m + 1
    feature_arr = np.full(cap, -1, dtype=np.int64)
    threshold_arr = np.zeros(cap, dtype=np.float64)
    left_arr = np.full(cap, -1, dtype=np.int64)
    right_arr = np.full(cap, -1, dtype=np.int64)
    n0_arr = np.zeros(cap, dtype=np.int64)
    n1_arr = np.zeros(cap, dtype=np.int64)
    dec_arr = np.zeros(cap, dtype=np.float64)
    cdef int64_t[::1] feature = feature_arr
    cdef double[::1] threshold = threshold_arr
    cdef int64_t[::1] left = left_arr
    cdef int64_t[::1] right = right_arr
    cdef int64_t[::1] n0 = n0_arr
    cdef int64_t[::1] n1 = n1_arr
    cdef double[::1] dec = dec_arr

    stack_arr = np.empty((cap, 4), dtype=np.int64)
    cdef int64_t[:, ::1] stack = stack_arr
    feats_arr = np.empty(d, dtype=np.int64)
    cdef int64_t[::1] feats = feats_arr

    cdef double* vbuf = <double*>malloc(m * sizeof(double))
    cdef int64_t* pbuf = <int64_t*>malloc(m * sizeof(int64_t))
    if vbuf == NULL or pbuf == NULL:
        free(vbuf)
        free(pbuf)
        raise MemoryError()

    cdef uint64_t state = seed
    cdef Py_ssize_t top = 0
    cdef Py_ssize_t n_nodes = 1
    cdef int64_t node, start, end, depth
    cdef int64_t c0, c1, l0, l1, cnt, tmp
    cdef double W0, W1, parent, best, proxy, wl0, wl1, wr0, wr1, a
    cdef double wleft, wright, root_w
    cdef int64_t best_f, f, lo, hi
    cdef double best_thr
    cdef int found

    # root weighted size
    c0 = 0
    c1 = 0
    for i in range(m):
        if y[idx[i]] == 1:
            c1 += counts[idx[i]]
        else:
            c0 += counts[idx[i]]
    root_w = c0 * w0 + c1 * w1

    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = m
    stack[0, 3] = 0
    top = 1
    try:
        with nogil:
            while top > 0:
                top -= 1
                node = stack[top, 0]
                start = stack[top, 1]
                end = stack[top, 2]
                depth = stack[top, 3]

                c0 = 0
                c1 = 0
                for i in range(start, end):
                    if y[idx[i]] == 1:
                        c1 += counts[idx[i]]
                    else:
                        c0 += counts[idx[i]]
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

                for i in range(d):
                    feats[i] = i
                for j in range(mtry):
                    k = j + <Py_ssize_t>(_splitmix_next(&state) % <uint64_t>(d - j))
                    tmp = feats[j]
                    feats[j] = feats[k]
                    feats[k] = tmp

                for j in range(mtry):
                    f = feats[j]
                    cnt = end - start
                    for i in range(cnt):
                        pbuf[i] = idx[start + i]
                        vbuf[i] = Xt[f, pbuf[i]]
                    _introsort(vbuf, pbuf, cnt, 2 * <int>log2(<double>cnt + 1.0))
                    l0 = 0
                    l1 = 0
                    for i in range(cnt - 1):
                        if y[pbuf[i]] == 1:
                            l1 += counts[pbuf[i]]
                        else:
                            l0 += counts[pbuf[i]]
                        if not (vbuf[i] < vbuf[i + 1]):
                            continue
                        if l0 + l1 < min_samples_leaf:
                            continue
                        if (c0 - l0) + (c1 - l1) < min_samples_leaf:
                            continue
                        wl0 = l0 * w0
                        wl1 = l1 * w1
                        wr0 = (c0 - l0) * w0
                        wr1 = (c1 - l1) * w1
                        proxy = wl0 * wl1 / (wl0 + wl1) + wr0 * wr1 / (wr0 + wr1)
                        if proxy < best:
                            best = proxy
                            best_f = f
                            a = vbuf[i]
                            best_thr = a

                if best_f < 0:
                    continue

                # partition idx[start:end] on X[:, best_f] <= best_thr
                lo = start
                hi = end - 1
                while lo <= hi:
                    if Xt[best_f, idx[lo]] <= best_thr:
                        lo += 1
                    else:
                        tmp = idx[lo]
                        idx[lo] = idx[hi]
                        idx[hi] = tmp
                        hi -= 1

                feature[node] = best_f
                threshold[node] = best_thr
                dec[node] = 2.0 * (parent - best) / root_w
                left[node] = n_nodes
                right[node] = n_nodes + 1
                # right pushed first so the left subtree is grown first
                stack[top, 0] = n_nodes + 1
                stack[top, 1] = lo
                stack[top, 2] = end
                stack[top, 3] = depth + 1
                top += 1
                stack[top, 0] = n_nodes
                stack[top, 1] = start
                stack[top, 2] = lo
                stack[top, 3] = depth + 1
                top += 1
                n_nodes += 2
    finally:
        free(vbuf)
        free(pbuf)

    return (feature_arr[:n_nodes].copy(), threshold_arr[:n_nodes].copy(),
            left_arr[:n_nodes].copy(), right_arr[:n_nodes].copy(),
            n0_arr[:n_nodes].copy(), n1_arr[:n_nodes].copy(),
            dec_arr[:n_nodes].copy())


def apply_tree(const double[:, ::1] X, const int64_t[::1] feature,
               const double[::1] threshold, const int64_t[::1] left,
               const int64_t[::1] right):
    """Leaf index reached by every row of ``X``."""
    cdef Py_ssize_t n = X.shape[0]
    out_arr = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    cdef Py_ssize_t r
    cdef int64_t node
    with nogil:
        for r in range(n):
            node = 0
            while feature[node] >= 0:
                if X[r, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[r] = node
    return out_arr


def im2col(const double[:, :, :, ::1] x, int k, int stride, int pad, int ho, int wo):
    """(N, C, H, W) -> (N, C*k*k, ho*wo) with zero padding."""
    cdef Py_ssize_t N = x.shape[0]
    cdef Py_ssize_t C = x.shape[1]
    cdef Py_ssize_t H = x.shape[2]
    cdef Py_ssize_t W = x.shape[3]
    out_arr = np.zeros((N, C * k * k, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, ki, kj, oi, oj, row, ii, jj
    with nogil:
        for n in range(N):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for oi in range(ho):
                            ii = oi * stride + ki - pad
                            if ii < 0 or ii >= H:
                                continue
                            for oj in range(wo):
                                jj = oj * stride + kj - pad
                                if jj < 0 or jj >= W:
                                    continue
                                out[n, row, oi * wo + oj] = x[n, c, ii, jj]
    return out_arr


def col2im(const double[:, :, ::1] cols, int C, int H, int W, int k, int stride,
           int pad, int ho, int wo):
    """Adjoint of :func:`im2col`: scatter-add columns back to (N, C, H, W)."""
    cdef Py_ssize_t N = cols.shape[0]
    out_arr = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, ki, kj, oi, oj, row, ii, jj
    with nogil:
        for n in range(N):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for oi in range(ho):
                            ii = oi * stride + ki - pad
                            if ii < 0 or ii >= H:
                                continue
                            for oj in range(wo):
                                jj = oj * stride + kj - pad
                                if jj < 0 or jj >= W:
                                    continue
                                out[n, c, ii, jj] += cols[n, row, oi * wo + oj]
    return out_arr


cdef void _box_table(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] s, int r) noexcept nogil:
    # padded product a*b, cumulative down columns then along rows, as the fallback does
    cdef Py_ssize_t H = a.shape[0]
    cdef Py_ssize_t W = a.shape[1]
    cdef Py_ssize_t i, j
    cdef Py_ssize_t hp = s.shape[0]
    cdef Py_ssize_t wp = s.shape[1]
    for i in range(hp):
        for j in range(wp):
            s[i, j] = 0.0
    for i in range(H):
        for j in range(W):
            s[i + r + 1, j + r + 1] = a[i, j] * b[i, j]
    for i in range(1, hp):
        for j in range(wp):
            s[i, j] = s[i - 1, j] + s[i, j]
    for i in range(hp):
        for j in range(1, wp):
            s[i, j] = s[i, j - 1] + s[i, j]


cdef inline double _box(double[:, ::1] s, Py_ssize_t i, Py_ssize_t j, int k) noexcept nogil:
    return s[i + k, j + k] - s[i, j + k] - s[i + k, j] + s[i, j]


def lk_solve(const double[:, ::1] ix, const double[:, ::1] iy, const double[:, ::1] it,
             int window, double tau):
    """Per-pixel least-squares flow over a square window (zero outside the image)."""
    cdef Py_ssize_t H = ix.shape[0]
    cdef Py_ssize_t W = ix.shape[1]
    cdef int r = window // 2
    cdef int k = 2 * r + 1
    u_arr = np.zeros((H, W), dtype=np.float64)
    v_arr = np.zeros((H, W), dtype=np.float64)
    valid_arr = np.zeros((H, W), dtype=np.bool_)
    tables = np.empty((5, H + 2 * r + 1, W + 2 * r + 1), dtype=np.float64)
    cdef double[:, ::1] txx = tables[0]
    cdef double[:, ::1] txy = tables[1]
    cdef double[:, ::1] tyy = tables[2]
    cdef double[:, ::1] txt = tables[3]
    cdef double[:, ::1] tyt = tables[4]
    cdef double[:, ::1] u = u_arr
    cdef double[:, ::1] v = v_arr
    cdef unsigned char[:, ::1] valid = valid_arr.view(np.uint8)
    cdef Py_ssize_t i, j
    cdef double sxx, sxy, syy, sxt, syt, tr, det, disc, lmin
    with nogil:
        _box_table(ix, ix, txx, r)
        _box_table(ix, iy, txy, r)
        _box_table(iy, iy, tyy, r)
        _box_table(ix, it, txt, r)
        _box_table(iy, it, tyt, r)
        for i in range(H):
            for j in range(W):
                sxx = _box(txx, i, j, k)
                sxy = _box(txy, i, j, k)
                syy = _box(tyy, i, j, k)
                sxt = _box(txt, i, j, k)
                syt = _box(tyt, i, j, k)
                tr = sxx + syy
                det = sxx * syy - sxy * sxy
                disc = (sxx - syy) * (sxx - syy) + 4.0 * sxy * sxy
                lmin = 0.5 * (tr - sqrt(disc))
                if lmin < tau:
                    continue
                valid[i, j] = 1
                u[i, j] = (-syy * sxt + sxy * syt) / det
                v[i, j] = (sxy * sxt - sxx * syt) / det
    return u_arr, v_arr, valid_arr
