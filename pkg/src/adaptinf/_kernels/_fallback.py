"""Pure numpy versions of the compiled kernels, same signatures and results."""

from __future__ import annotations

import numpy as np


def knn_pool_predict(order, sdist, counts, sum1, sum2, queries, k):
    queries = np.asarray(queries, dtype=np.int64)
    n_arms = counts.shape[0]
    nq = queries.shape[0]
    out1 = np.zeros((nq, n_arms))
    out2 = np.zeros((nq, n_arms))
    outu = np.zeros((nq, n_arms))
    if nq == 0:
        return out1, out2, outu
    od = order[queries]
    sd = sdist[queries]
    rows = np.arange(nq)
    for a in range(n_arms):
        total = counts[a].sum()
        if total <= 0:
            continue
        need = float(min(k, total))
        c = counts[a][od]
        cum = np.cumsum(c, axis=1)
        # first sorted position where the running count reaches `need`
        pos = np.argmax(cum >= need - 1e-9, axis=1)
        kth = sd[rows, pos][:, None]
        less = sd < kth
        eq = sd == kth
        s1 = sum1[a][od]
        s2 = sum2[a][od]
        n_less = (c * less).sum(axis=1)
        n_eq = (c * eq).sum(axis=1)
        take = (need - n_less) / n_eq
        out1[:, a] = (s1 * less).sum(axis=1) + take * (s1 * eq).sum(axis=1)
        out2[:, a] = (s2 * less).sum(axis=1) + take * (s2 * eq).sum(axis=1)
        outu[:, a] = need
    return out1, out2, outu


def _sqdist(train, query):
    acc = np.zeros((query.shape[0], train.shape[0]))
    for c in range(train.shape[1]):
        diff = train[None, :, c] - query[:, None, c]
        acc = acc + diff * diff
    return acc


def knn_brute_predict(train, y, query, k):
    m = train.shape[0]
    nq = query.shape[0]
    out1 = np.zeros(nq)
    out2 = np.zeros(nq)
    outu = np.zeros(nq)
    if m == 0 or nq == 0:
        return out1, out2, outu
    kk = min(k, m)
    d = _sqdist(train, query)
    kth = np.partition(d, kk - 1, axis=1)[:, kk - 1][:, None]
    less = d < kth
    eq = d == kth
    n_less = less.sum(axis=1)
    take = (kk - n_less) / eq.sum(axis=1)
    y2 = y * y
    out1 = less @ y + take * (eq @ y)
    out2 = less @ y2 + take * (eq @ y2)
    outu[:] = kk
    return out1, out2, outu


def thompson_probs(mean, sd, draws, chunk=256):
    n, K = mean.shape
    D = draws.shape[0]
    out = np.zeros((n, K))
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        vals = mean[sl, None, :] + sd[sl, None, :] * draws[None, :, :]
        best = np.argmax(vals, axis=2)
        for a in range(K):
            out[sl, a] = (best == a).sum(axis=1) / D
    return out
