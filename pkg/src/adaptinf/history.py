"""Interaction records and a columnar history container."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .env import Context, SplitFlag
from .errors import DomainError
from .policies import ActionDistribution


@dataclass(frozen=True, eq=False)
class Observation:
    """One round: context, chosen arm, outcome, and the logged distribution.

    ``t`` is 1-based. ``snapshot_id`` names the nuisance snapshot used to
    form predictions for this round.
    """

    t: int
    ctx: Context
    arm: int
    y: float
    logged_dist: ActionDistribution
    split: SplitFlag = SplitFlag(0)
    snapshot_id: int = 0

    def __post_init__(self):
        if not 0 <= self.arm < self.logged_dist.K:
            raise DomainError(f"arm {self.arm} out of range for {self.logged_dist.K} arms")
        if not np.isfinite(self.y):
            raise DomainError("outcome must be finite")


class History:
    """Columnar store of observations ordered by time.

    Attributes
    ----------
    t : int array, shape (n,)
    features : float array, shape (n, p)
    pool_index : int array, shape (n,); -1 when unknown
    arm : int array, shape (n,)
    y : float array, shape (n,)
    probs : float array, shape (n, K); logged action distributions
    floor : float array, shape (n,)
    split : int array, shape (n,)
    snapshot_id : int array, shape (n,)
    """

    _fields = ("t", "features", "pool_index", "arm", "y", "probs", "floor", "split", "snapshot_id")

    def __init__(self, t, features, pool_index, arm, y, probs, floor=None, split=None, snapshot_id=None):
        self.t = np.asarray(t, dtype=np.int64).reshape(-1)
        n = self.t.shape[0]
        self.features = np.asarray(features, dtype=float).reshape(n, -1)
        self.pool_index = np.asarray(pool_index, dtype=np.int64).reshape(-1)
        self.arm = np.asarray(arm, dtype=np.int64).reshape(-1)
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.probs = np.asarray(probs, dtype=float).reshape(n, -1)
        self.floor = np.zeros(n) if floor is None else np.broadcast_to(np.asarray(floor, float), (n,)).copy()
        self.split = np.zeros(n, np.int64) if split is None else np.asarray(split, dtype=np.int64).reshape(-1)
        self.snapshot_id = (np.zeros(n, np.int64) if snapshot_id is None
                            else np.asarray(snapshot_id, dtype=np.int64).reshape(-1))
        for name in self._fields:
            if getattr(self, name).shape[0] != n:
                raise DomainError(f"history column {name} has the wrong length")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise DomainError("history times must be strictly increasing")

    @classmethod
    def from_observations(cls, obs: Iterable[Observation]) -> "History":
        obs = list(obs)
        if not obs:
            raise DomainError("history needs at least one observation")
        return cls(
            [o.t for o in obs],
            np.stack([o.ctx.features for o in obs]),
            [o.ctx.pool_index for o in obs],
            [o.arm for o in obs],
            [o.y for o in obs],
            np.stack([o.logged_dist.probs for o in obs]),
            [o.logged_dist.floor for o in obs],
            [o.split.zeta for o in obs],
            [o.snapshot_id for o in obs],
        )

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def K(self) -> int:
        return self.probs.shape[1]

    @property
    def propensity(self) -> np.ndarray:
        """Logged probability of the chosen arm for each round."""
        return self.probs[np.arange(len(self)), self.arm]

    def __getitem__(self, i: int) -> Observation:
        return Observation(
            int(self.t[i]),
            Context(self.features[i], int(self.pool_index[i])),
            int(self.arm[i]),
            float(self.y[i]),
            ActionDistribution(self.probs[i], float(self.floor[i])),
            SplitFlag(int(self.split[i])),
            int(self.snapshot_id[i]),
        )

    def __iter__(self) -> Iterator[Observation]:
        for i in range(len(self)):
            yield self[i]

    def select(self, mask) -> "History":
        return History(*(getattr(self, name)[mask] for name in self._fields))

    def up_to(self, T: int) -> "History":
        """Observations with ``t <= T``."""
        return self.select(self.t <= T)
