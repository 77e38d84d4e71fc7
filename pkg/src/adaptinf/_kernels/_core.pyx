# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops for neighbor averaging and Thompson arm probabilities."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def knn_pool_predict(const cnp.int64_t[:, ::1] order,
                     const double[:, ::1] sdist,
                     const double[:, ::1] counts,
                     const double[:, ::1] sum1,
                     const double[:, ::1] sum2,
                     const cnp.int64_t[::1] queries,
                     long k):
    """Neighbor sums over a fixed point set with per-point multiplicities.

    Returns ``(m1, m2, used)`` of shape (n_queries, n_arms); the caller divides
    by ``used`` and applies priors where ``used == 0``.
    """
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t n_arms = counts.shape[0]
    cdef Py_ssize_t n_rows = order.shape[1]
    out1 = np.zeros((nq, n_arms))
    out2 = np.zeros((nq, n_arms))
    outu = np.zeros((nq, n_arms))
    cdef double[:, ::1] o1 = out1
    cdef double[:, ::1] o2 = out2
    cdef double[:, ::1] ou = outu
    cdef Py_ssize_t qi, a, j, jj, row, q
    cdef double total, need, gc, g1, g2, take, d0
    for a in range(n_arms):
        total = 0.0
        for j in range(n_rows):
            total += counts[a, j]
        if total <= 0:
            continue
        for qi in range(nq):
            q = queries[qi]
            need = k if k < total else total
            ou[qi, a] = need
            j = 0
            while need > 0 and j < n_rows:
                d0 = sdist[q, j]
                gc = 0.0
                g1 = 0.0
                g2 = 0.0
                jj = j
                while jj < n_rows and sdist[q, jj] == d0:
                    row = order[q, jj]
                    gc += counts[a, row]
                    g1 += sum1[a, row]
                    g2 += sum2[a, row]
                    jj += 1
                j = jj
                if gc <= 0:
                    continue
                if gc <= need:
                    o1[qi, a] += g1
                    o2[qi, a] += g2
                    need -= gc
                else:
                    take = need / gc
                    o1[qi, a] += take * g1
                    o2[qi, a] += take * g2
                    need = 0
    return out1, out2, outu


cdef void _select(double* buf, Py_ssize_t n, Py_ssize_t kth) noexcept nogil:
    # quickselect: buf[kth] ends up holding the kth smallest value
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j
    cdef double pivot, tmp
    while lo < hi:
        pivot = buf[(lo + hi) // 2]
        i = lo
        j = hi
        while i <= j:
            while buf[i] < pivot:
                i += 1
            while buf[j] > pivot:
                j -= 1
            if i <= j:
                tmp = buf[i]
                buf[i] = buf[j]
                buf[j] = tmp
                i += 1
                j -= 1
        if kth <= j:
            hi = j
        elif kth >= i:
            lo = i
        else:
            return


def knn_brute_predict(const double[:, ::1] train,
                      const double[::1] y,
                      const double[:, ::1] query,
                      long k):
    """Tie-averaged k-nearest-neighbor sums of ``y`` and ``y**2``.

    Returns ``(m1, m2, used)`` of length n_queries.
    """
    cdef Py_ssize_t m = train.shape[0]
    cdef Py_ssize_t p = train.shape[1]
    cdef Py_ssize_t nq = query.shape[0]
    out1 = np.zeros(nq)
    out2 = np.zeros(nq)
    outu = np.zeros(nq)
    if m == 0:
        return out1, out2, outu
    cdef double[::1] o1 = out1
    cdef double[::1] o2 = out2
    cdef double[::1] ou = outu
    d_arr = np.empty(m)
    s_arr = np.empty(m)
    cdef double[::1] d = d_arr
    cdef double[::1] s = s_arr
    cdef Py_ssize_t kk = k if k < m else m
    cdef Py_ssize_t qi, i, c, n_less
    cdef double acc, diff, kth, l1, l2, e1, e2, n_eq
    for qi in range(nq):
        for i in range(m):
            acc = 0.0
            for c in range(p):
                diff = train[i, c] - query[qi, c]
                acc = acc + diff * diff
            d[i] = acc
            s[i] = acc
        _select(&s[0], m, kk - 1)
        kth = s[kk - 1]
        n_less = 0
        n_eq = 0.0
        l1 = 0.0
        l2 = 0.0
        e1 = 0.0
        e2 = 0.0
        for i in range(m):
            if d[i] < kth:
                n_less += 1
                l1 += y[i]
                l2 += y[i] * y[i]
            elif d[i] == kth:
                n_eq += 1.0
                e1 += y[i]
                e2 += y[i] * y[i]
        o1[qi] = l1 + (kk - n_less) / n_eq * e1
        o2[qi] = l2 + (kk - n_less) / n_eq * e2
        ou[qi] = kk
    return out1, out2, outu


def thompson_probs(const double[:, ::1] mean,
                   const double[:, ::1] sd,
                   const double[:, ::1] draws):
    """Fraction of common normal draws under which each arm is maximal."""
    cdef Py_ssize_t n = mean.shape[0]
    cdef Py_ssize_t K = mean.shape[1]
    cdef Py_ssize_t D = draws.shape[0]
    out = np.zeros((n, K))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, t, a, best
    cdef double v, bv, inv = 1.0 / D
    for i in range(n):
        for t in range(D):
            best = 0
            bv = mean[i, 0] + sd[i, 0] * draws[t, 0]
            for a in range(1, K):
                v = mean[i, a] + sd[i, a] * draws[t, a]
                if v > bv:
                    bv = v
                    best = a
            o[i, best] += inv
    return out
