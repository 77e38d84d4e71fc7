"""Online k-nearest-neighbor estimates of per-arm outcome mean and second moment.

Ties at the k-th neighbor distance are averaged: if several points share the
boundary distance they contribute their mean outcome times the number of
remaining slots. This makes predictions independent of insertion order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .env import Context, FeaturePool
from .errors import DomainError

DEFAULT_K = 25
DEFAULT_CADENCE = 100
DEFAULT_VARIANCE_FLOOR = 1e-4
# above this many rows the n*n neighbor table is not precomputed
MAX_GEOMETRY_ROWS = 4000


def knn_regress(train: np.ndarray, y: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Tie-averaged k-NN mean of ``y`` at each query row (no standardization)."""
    train = np.ascontiguousarray(train, dtype=float)
    query = np.ascontiguousarray(query, dtype=float)
    m1, _, used = _kernels.knn_brute_predict(train, np.ascontiguousarray(y, dtype=float), query, int(k))
    if used.size and used[0] == 0:
        raise DomainError("cannot regress on an empty training set")
    return m1 / used


def finish_moments(m1, m2, used, prior_mean, prior_second, variance_floor):
    """Turn neighbor sums into mean and second-moment predictions.

    Cells without any neighbor get the priors; the second moment is raised to
    at least ``mean**2 + variance_floor``.
    """
    has = used > 0
    denom = np.where(has, used, 1.0)
    f = np.where(has, m1 / denom, prior_mean)
    e = np.where(has, m2 / denom, prior_second)
    return f, np.maximum(e, f * f + variance_floor)


class PoolGeometry:
    """Per-row neighbor order and sorted squared distances over a feature pool."""

    def __init__(self, pool: FeaturePool):
        if pool.n > MAX_GEOMETRY_ROWS:
            raise DomainError(f"pool has {pool.n} rows; neighbor table limited to {MAX_GEOMETRY_ROWS}")
        xs = np.ascontiguousarray(pool.standardize(pool.rows))
        d = _kernels._fallback._sqdist(xs, xs)
        self.order = np.ascontiguousarray(np.argsort(d, axis=1, kind="stable"), dtype=np.int64)
        self.sdist = np.ascontiguousarray(np.take_along_axis(d, self.order, axis=1))
        self.n = pool.n


@dataclass(frozen=True, eq=False)
class NuisanceSnapshot:
    """Frozen training data visible before ``snapshot_time``.

    Attributes
    ----------
    snapshot_time : int
        Only observations with index strictly below this are included.
    K : int
        Number of arms.
    features : numpy.ndarray
        Standardized features of included observations, shape (m, p).
    arm, y, pool_index : numpy.ndarray
        Per-observation arm, outcome, and pool row (-1 if unknown).
    center, scale : numpy.ndarray
        Standardization applied to query features.
    k, prior_mean, prior_second, variance_floor
        Learner settings.
    """

    snapshot_time: int
    K: int
    features: np.ndarray
    arm: np.ndarray
    y: np.ndarray
    pool_index: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    k: int = DEFAULT_K
    prior_mean: float = 0.0
    prior_second: float = 1.0
    variance_floor: float = DEFAULT_VARIANCE_FLOOR

    @property
    def size(self) -> int:
        return self.y.shape[0]

    def arm_count(self, arm: int) -> int:
        return int(np.sum(self.arm == arm))

    def _finish(self, m1, m2, used):
        return finish_moments(m1, m2, used, self.prior_mean, self.prior_second, self.variance_floor)

    def predict_features(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean and second-moment tables (n, K) for raw feature rows ``X``."""
        q = np.ascontiguousarray(((np.asarray(X, float) - self.center) / self.scale).reshape(-1, self.center.shape[0]))
        n = q.shape[0]
        m1 = np.zeros((n, self.K))
        m2 = np.zeros((n, self.K))
        used = np.zeros((n, self.K))
        for a in range(self.K):
            sel = self.arm == a
            if not sel.any():
                continue
            r1, r2, ru = _kernels.knn_brute_predict(
                np.ascontiguousarray(self.features[sel]), np.ascontiguousarray(self.y[sel]), q, self.k
            )
            m1[:, a], m2[:, a], used[:, a] = r1, r2, ru
        return self._finish(m1, m2, used)

    def pool_sums(self, n_rows: int):
        """Per-arm per-row counts and outcome sums, each shape (K, n_rows)."""
        if self.size and (self.pool_index.min() < 0 or self.pool_index.max() >= n_rows):
            raise DomainError("snapshot contains observations without a valid pool index")
        counts = np.zeros((self.K, n_rows))
        s1 = np.zeros((self.K, n_rows))
        s2 = np.zeros((self.K, n_rows))
        key = self.arm * n_rows + self.pool_index
        size = self.K * n_rows
        counts.flat[:] = np.bincount(key, minlength=size)
        s1.flat[:] = np.bincount(key, weights=self.y, minlength=size)
        s2.flat[:] = np.bincount(key, weights=self.y * self.y, minlength=size)
        return counts, s1, s2

    def predict_pool(self, geometry: PoolGeometry, rows=None) -> tuple[np.ndarray, np.ndarray]:
        """Mean and second-moment tables for pool rows via the neighbor table.

        Equal to :meth:`predict_features` on the same rows whenever every
        training observation came from the pool.
        """
        rows = np.arange(geometry.n, dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
        counts, s1, s2 = self.pool_sums(geometry.n)
        m1, m2, used = _kernels.knn_pool_predict(geometry.order, geometry.sdist, counts, s1, s2, rows, self.k)
        return self._finish(m1, m2, used)

    def predict_contexts(self, contexts) -> tuple[np.ndarray, np.ndarray]:
        return self.predict_features(np.stack([c.features for c in contexts]))

    def predict_mean(self, ctx: Context, arm: int) -> float:
        return float(self.predict_features(ctx.features[None, :])[0][0, self._arm(arm)])

    def predict_second_moment(self, ctx: Context, arm: int) -> float:
        return float(self.predict_features(ctx.features[None, :])[1][0, self._arm(arm)])

    def _arm(self, arm: int) -> int:
        if not 0 <= arm < self.K:
            raise DomainError(f"arm {arm} out of range for {self.K} arms")
        return int(arm)


class OnlineKNN:
    """Append-only per-arm training store with cadence-based rebuilds.

    Parameters
    ----------
    K : int
        Number of arms.
    center, scale : array_like
        Feature standardization (typically the pool's column mean and sd).
    k : int
        Neighbor count.
    cadence : int
        A rebuild is counted each time the number of stored observations
        reaches a multiple of ``cadence``.
    """

    def __init__(self, K, center, scale, k=DEFAULT_K, cadence=DEFAULT_CADENCE,
                 variance_floor=DEFAULT_VARIANCE_FLOOR, prior_mean=0.0, prior_second=1.0,
                 capacity=1024):
        if k < 1 or cadence < 1:
            raise DomainError("k and cadence must be positive")
        if not variance_floor > 0:
            raise DomainError("variance_floor must be positive")
        self.K = int(K)
        self.center = np.asarray(center, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        self.k = int(k)
        self.cadence = int(cadence)
        self.variance_floor = float(variance_floor)
        self.prior_mean = float(prior_mean)
        self.prior_second = float(prior_second)
        p = self.center.shape[0]
        self._n = 0
        self._t = np.zeros(capacity, np.int64)
        self._x = np.zeros((capacity, p))
        self._arm = np.zeros(capacity, np.int64)
        self._y = np.zeros(capacity)
        self._pool = np.zeros(capacity, np.int64)
        self.rebuilds = 0
        self.current = self.snapshot(1)

    @classmethod
    def for_pool(cls, K: int, pool: FeaturePool, **kw) -> "OnlineKNN":
        return cls(K, pool.center, pool.scale, **kw)

    def __len__(self) -> int:
        return self._n

    def _grow(self):
        cap = 2 * self._t.shape[0]
        # reallocate rather than resize in place so existing snapshot views stay valid
        for name in ("_t", "_x", "_arm", "_y", "_pool"):
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:], old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def add(self, t: int, features, arm: int, y: float, pool_index: int = -1) -> "OnlineKNN":
        if self._n and t <= self._t[self._n - 1]:
            raise DomainError(f"observation index {t} not after last stored index {self._t[self._n - 1]}")
        if not 0 <= arm < self.K:
            raise DomainError(f"arm {arm} out of range")
        if self._n == self._t.shape[0]:
            self._grow()
        i = self._n
        self._t[i] = t
        self._x[i] = (np.asarray(features, float) - self.center) / self.scale
        self._arm[i] = arm
        self._y[i] = y
        self._pool[i] = pool_index
        self._n += 1
        if self._n % self.cadence == 0:
            self.rebuilds += 1
            self.current = self.snapshot(int(t) + 1)
        return self

    def add_batch(self, t, features, arm, y, pool_index=None) -> "OnlineKNN":
        """Append several observations; rebuild bookkeeping as for :meth:`add`."""
        t = np.asarray(t, np.int64)
        if pool_index is None:
            pool_index = np.full(t.shape[0], -1, np.int64)
        for i in range(t.shape[0]):
            self.add(int(t[i]), features[i], int(arm[i]), float(y[i]), int(pool_index[i]))
        return self

    def update(self, obs) -> "OnlineKNN":
        """Ingest one :class:`~adaptinf.history.Observation`."""
        return self.add(obs.t, obs.ctx.features, obs.arm, obs.y, obs.ctx.pool_index)

    def snapshot(self, t: int) -> NuisanceSnapshot:
        """Frozen view of observations with index below ``t``."""
        if t < 1:
            raise DomainError("snapshot time must be at least 1")
        m = int(np.searchsorted(self._t[: self._n], t, side="left"))
        return NuisanceSnapshot(
            int(t), self.K, self._x[:m], self._arm[:m], self._y[:m], self._pool[:m],
            self.center, self.scale, self.k, self.prior_mean, self.prior_second, self.variance_floor,
        )


class PoolKNN:
    """Running per-row sufficient statistics for observations drawn from a pool.

    Produces the same predictions as :meth:`NuisanceSnapshot.predict_pool` on
    a snapshot holding the same observations, without storing them.
    """

    def __init__(self, K: int, geometry: PoolGeometry, k=DEFAULT_K, variance_floor=DEFAULT_VARIANCE_FLOOR,
                 prior_mean=0.0, prior_second=1.0):
        self.K = int(K)
        self.geometry = geometry
        self.k = int(k)
        self.variance_floor = float(variance_floor)
        self.prior_mean = float(prior_mean)
        self.prior_second = float(prior_second)
        n = geometry.n
        self.counts = np.zeros((self.K, n))
        self.sum1 = np.zeros((self.K, n))
        self.sum2 = np.zeros((self.K, n))
        self._rows = np.arange(n, dtype=np.int64)

    def add(self, pool_index, arm, y) -> None:
        pool_index = np.asarray(pool_index, np.int64)
        arm = np.asarray(arm, np.int64)
        y = np.asarray(y, float)
        np.add.at(self.counts, (arm, pool_index), 1.0)
        np.add.at(self.sum1, (arm, pool_index), y)
        np.add.at(self.sum2, (arm, pool_index), y * y)

    def predict(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and second-moment tables over all pool rows, shape (n, K)."""
        g = self.geometry
        m1, m2, used = _kernels.knn_pool_predict(g.order, g.sdist, self.counts, self.sum1, self.sum2,
                                                 self._rows, self.k)
        return finish_moments(m1, m2, used, self.prior_mean, self.prior_second, self.variance_floor)
