"""Single-trajectory bandit simulation on a feature pool.

Every context is a pool row, so nuisance predictions and the deployed policy
can be tabulated over all rows once per retraining block. Within a block the
propensity map is fixed, so the block's rounds are generated in one pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .env import FeaturePool, Scenario, mean_table, sd_table
from .errors import DomainError
from .history import History
from .nuisance import (
    DEFAULT_CADENCE,
    DEFAULT_K,
    DEFAULT_VARIANCE_FLOOR,
    MAX_GEOMETRY_ROWS,
    NuisanceSnapshot,
    OnlineKNN,
    PoolGeometry,
    PoolKNN,
)
from .policies import Policy, PolicyKind, sample_actions

logger = logging.getLogger(__name__)

STREAMS = ("context", "action", "outcome", "split", "thompson", "external")


def stream_seed(base_seed: int, rep_index: int, stream: str) -> np.random.SeedSequence:
    """Seed for one named stream of one replication.

    Depends only on ``(base_seed, rep_index, stream)``, so replications can run
    in any order or on any worker.
    """
    if stream not in STREAMS:
        raise DomainError(f"unknown stream {stream!r}")
    return np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(rep_index), STREAMS.index(stream)))


def replication_rngs(base_seed: int, rep_index: int) -> dict[str, np.random.Generator]:
    return {s: np.random.default_rng(stream_seed(base_seed, rep_index, s)) for s in STREAMS}


@dataclass(frozen=True)
class SimulationSettings:
    """Knobs of one simulated trajectory.

    ``split_ratio`` is the probability that a round is routed to the
    features-only history. When ``split_training`` is true the nuisance
    models (and hence the policy) learn only from rounds with flag 0.
    ``external_size`` pre-draws that many independent pool contexts.
    """

    T: int
    cadence: int = DEFAULT_CADENCE
    k: int = DEFAULT_K
    variance_floor: float = DEFAULT_VARIANCE_FLOOR
    prior_mean: float = 0.0
    prior_second: float = 1.0
    split_ratio: float = 0.5
    split_training: bool = False
    external_size: int = 0

    def __post_init__(self):
        if self.T < 1 or self.cadence < 1:
            raise DomainError("T and cadence must be positive")
        if not 0.0 < self.split_ratio < 1.0:
            raise DomainError("split_ratio must lie in (0, 1)")


@dataclass(eq=False)
class Trajectory:
    """One simulated run plus the per-block tables the estimators need.

    Attributes
    ----------
    pool_index, arm, y, split : arrays of length T
    probs : (T, K) logged action distributions
    block_F, block_E : (n_blocks, n_rows, K) nuisance predictions per block
    block_P : (n_blocks, n_rows, K) deployed propensity map per block
    external : indices of independently drawn pool contexts
    potential : (T, K) outcomes every arm would have produced
    """

    pool: FeaturePool
    cadence: int
    pool_index: np.ndarray
    arm: np.ndarray
    y: np.ndarray
    split: np.ndarray
    probs: np.ndarray
    floor: float
    block_F: np.ndarray
    block_E: np.ndarray
    block_P: np.ndarray
    external: np.ndarray
    potential: np.ndarray
    settings: SimulationSettings = field(default=None)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.probs.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.T + 1)

    @property
    def block(self) -> np.ndarray:
        return (self.times - 1) // self.cadence

    def block_starts(self) -> np.ndarray:
        return np.arange(self.block_P.shape[0]) * self.cadence + 1

    def block_arm_counts(self) -> np.ndarray:
        """Training observations per arm available at each block start, shape (n_blocks, K)."""
        train = (self.split == 0) if self.settings is not None and self.settings.split_training \
            else np.ones(self.T, bool)
        onehot = np.zeros((self.T, self.K))
        onehot[np.flatnonzero(train), self.arm[train]] = 1.0
        cum = np.vstack([np.zeros((1, self.K)), np.cumsum(onehot, axis=0)])
        return cum[self.block_starts() - 1]

    def F_rounds(self) -> np.ndarray:
        return self.block_F[self.block, self.pool_index]

    def history(self) -> History:
        return History(
            self.times, self.pool.rows[self.pool_index], self.pool_index, self.arm, self.y,
            self.probs, self.floor, self.split, self.block,
        )

    def snapshots(self) -> dict[int, NuisanceSnapshot]:
        """Replay the nuisance learner and return its snapshot at each block start."""
        s = self.settings
        knn = OnlineKNN.for_pool(self.K, self.pool, k=s.k, cadence=s.cadence, variance_floor=s.variance_floor,
                                 prior_mean=s.prior_mean, prior_second=s.prior_second)
        keep = (self.split == 0) if s.split_training else np.ones(self.T, bool)
        t = self.times
        knn.add_batch(t[keep], self.pool.rows[self.pool_index[keep]], self.arm[keep], self.y[keep],
                      self.pool_index[keep])
        return {b: knn.snapshot(int(start)) for b, start in enumerate(self.block_starts())}


def simulate(scn: Scenario, pool: FeaturePool, kind: PolicyKind, settings: SimulationSettings,
             rngs: dict[str, np.random.Generator], threshold: float | None = None,
             geometry: PoolGeometry | None = None) -> Trajectory:
    """Run the adaptive experiment for ``settings.T`` rounds.

    Random inputs come from separate named streams: contexts, action uniforms,
    outcome noise (one standard normal per round, shared by all arms), split
    flags, Thompson draws, and the external pool. Outcomes are binarized at
    ``threshold`` when given.
    """
    T, B, K = settings.T, settings.cadence, scn.K
    idx = rngs["context"].integers(pool.n, size=T)
    u = rngs["action"].random(T)
    eps = rngs["outcome"].standard_normal(T)
    split = (rngs["split"].random(T) < settings.split_ratio).astype(np.int64)
    external = rngs["external"].integers(pool.n, size=settings.external_size)
    policy = Policy(kind, K, rng=rngs["thompson"])

    mu = mean_table(scn, pool)
    sd = sd_table(scn, pool)
    potential = mu[idx] + sd[idx] * eps[:, None]
    if threshold is not None:
        potential = (potential > threshold).astype(float)

    if geometry is None and pool.n <= MAX_GEOMETRY_ROWS:
        geometry = PoolGeometry(pool)
    learner_kw = dict(k=settings.k, variance_floor=settings.variance_floor,
                      prior_mean=settings.prior_mean, prior_second=settings.prior_second)
    if geometry is not None:
        learner = PoolKNN(K, geometry, **learner_kw)
    else:
        learner = OnlineKNN.for_pool(K, pool, cadence=B, **learner_kw)

    n_blocks = (T + B - 1) // B
    block_F = np.empty((n_blocks, pool.n, K))
    block_E = np.empty((n_blocks, pool.n, K))
    block_P = np.empty((n_blocks, pool.n, K))
    arm = np.empty(T, np.int64)
    probs = np.empty((T, K))
    for b in range(n_blocks):
        lo, hi = b * B, min((b + 1) * B, T)
        if geometry is not None:
            F, E = learner.predict()
        else:
            F, E = learner.snapshot(lo + 1).predict_features(pool.rows)
        P = policy.probs(F, E)
        block_F[b], block_E[b], block_P[b] = F, E, P
        rows = idx[lo:hi]
        probs[lo:hi] = P[rows]
        arm[lo:hi] = sample_actions(probs[lo:hi], u[lo:hi])
        sel = np.arange(lo, hi)
        if settings.split_training:
            sel = sel[split[lo:hi] == 0]
        y_blk = potential[sel, arm[sel]]
        if geometry is not None:
            learner.add(idx[sel], arm[sel], y_blk)
        else:
            learner.add_batch(sel + 1, pool.rows[idx[sel]], arm[sel], y_blk, idx[sel])
    y = potential[np.arange(T), arm]
    return Trajectory(pool, B, idx, arm, y, split, probs, policy.floor, block_F, block_E, block_P,
                      external, potential, settings)
