"""Action-selection rules that emit explicit, floored action distributions.

Arms are 0-based. Every rule can be evaluated row-wise on tables of predicted
means ``F`` and second moments ``E`` (shape (n, K)), which is how the
simulator computes a whole propensity map per retraining block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .env import Context
from .errors import DomainError, FloorViolationError
from .mathkit import normal_quantile

DEFAULT_FLOOR = 0.01
THOMPSON_FLOOR = 0.05
_SUM_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class ActionDistribution:
    """Probability vector over K arms with every entry at least ``floor``.

    ``floor=0`` disables the lower bound (useful for evaluation policies that
    put no mass on some arms).
    """

    probs: np.ndarray
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if p.size == 0 or not np.all(np.isfinite(p)):
            raise DomainError("action probabilities must be a finite nonempty vector")
        if abs(p.sum() - 1.0) > _SUM_TOL:
            raise DomainError(f"action probabilities sum to {p.sum():.12g}, not 1")
        if self.floor < 0:
            raise DomainError("floor must be nonnegative")
        if np.any(p < self.floor - 1e-12):
            raise FloorViolationError(f"probability {p.min():.4g} below floor {self.floor}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def K(self) -> int:
        return self.probs.shape[0]

    def __getitem__(self, arm: int) -> float:
        return float(self.probs[arm])


@dataclass(frozen=True)
class PolicyKind:
    """Rule name and parameters.

    Attributes
    ----------
    variant : str
        ``uniform``, ``epsilon_greedy``, ``ucb`` or ``thompson``.
    epsilon : float
        Exploration rate of epsilon-greedy.
    alpha : float
        UCB bonus uses the ``1 - alpha/2`` normal quantile.
    ucb_mix : float
        Weight of uniform exploration mixed into UCB.
    clip : tuple of float
        Thompson probability bounds; the lower bound is the floor.
    draws : int
        Monte Carlo draws for Thompson probabilities.
    floor : float or None
        Floor for non-Thompson variants (default 0.01).
    """

    variant: str = "uniform"
    epsilon: float = 0.1
    alpha: float = 0.05
    ucb_mix: float = 0.1
    clip: tuple = (THOMPSON_FLOOR, 1.0 - THOMPSON_FLOOR)
    draws: int = 2000
    floor: float | None = None

    def __post_init__(self):
        if self.variant not in ("uniform", "epsilon_greedy", "ucb", "thompson"):
            raise DomainError(f"unknown policy variant {self.variant!r}")
        for name in ("epsilon", "alpha", "ucb_mix"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise DomainError(f"{name} must lie in (0, 1), got {val}")
        lo, hi = self.clip
        if not 0.0 < lo < hi < 1.0:
            raise DomainError(f"clip bounds must satisfy 0 < low < high < 1, got {self.clip}")
        if self.draws < 1:
            raise DomainError("draws must be positive")
        if self.floor is not None and not 0.0 < self.floor < 1.0:
            raise DomainError(f"floor must lie in (0, 1), got {self.floor}")

    def effective_floor(self, K: int) -> float:
        if self.variant == "thompson":
            f = self.clip[0]
        else:
            f = DEFAULT_FLOOR if self.floor is None else self.floor
        # a floor above 1/K is unattainable; cap it at uniform
        return min(f, 1.0 / K)


def apply_floor(p: np.ndarray, floor: float) -> np.ndarray:
    """Raise entries below ``floor`` to it and rescale the rest proportionally.

    Rows already satisfying the floor are returned unchanged. Works on a single
    vector or row-wise on an (n, K) array.
    """
    p = np.array(p, dtype=float, ndmin=2)
    K = p.shape[1]
    if floor * K > 1.0 + 1e-12:
        raise DomainError(f"floor {floor} infeasible for {K} arms")
    pinned = np.zeros(p.shape, dtype=bool)
    for _ in range(K):
        low = (p < floor) & ~pinned
        if not low.any():
            break
        pinned |= low
        free_mass = 1.0 - floor * pinned.sum(axis=1, keepdims=True)
        rest = np.where(pinned, 0.0, p)
        tot = rest.sum(axis=1, keepdims=True)
        scale = np.divide(free_mass, tot, out=np.zeros_like(tot), where=tot > 0)
        p = np.where(pinned, floor, p * scale)
    return p


def _greedy_rows(scores: np.ndarray, high: float, low: float) -> np.ndarray:
    n, K = scores.shape
    out = np.full((n, K), low)
    out[np.arange(n), np.argmax(scores, axis=1)] = high
    return out


class Policy:
    """Row-wise evaluator for one :class:`PolicyKind`.

    Thompson probabilities use a fixed matrix of standard normal draws (common
    random numbers) so that maps computed at different blocks share noise.
    """

    def __init__(self, kind: PolicyKind, K: int, rng: np.random.Generator | None = None,
                 draws: np.ndarray | None = None):
        self.kind = kind
        self.K = int(K)
        self.floor = kind.effective_floor(self.K) if self.K > 1 else 0.0
        self.z = normal_quantile(1.0 - kind.alpha / 2.0)
        self.draws = None
        if kind.variant == "thompson" and self.K > 1:
            if draws is None:
                rng = np.random.default_rng() if rng is None else rng
                draws = rng.standard_normal((kind.draws, self.K))
            self.draws = np.ascontiguousarray(draws, dtype=float)

    def probs(self, F: np.ndarray, E: np.ndarray) -> np.ndarray:
        """Action probabilities for each row of the prediction tables."""
        F = np.ascontiguousarray(np.array(F, dtype=float, ndmin=2))
        E = np.ascontiguousarray(np.array(E, dtype=float, ndmin=2))
        if F.shape != E.shape or F.shape[1] != self.K:
            raise DomainError(f"prediction tables must have shape (n, {self.K})")
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(E))):
            raise DomainError("predictions contain NaN or infinite values")
        n, K = F.shape
        if K == 1:
            return np.ones((n, 1))
        kind = self.kind
        if kind.variant == "uniform":
            p = np.full((n, K), 1.0 / K)
        elif kind.variant == "epsilon_greedy":
            p = _greedy_rows(F, 1.0 - kind.epsilon, kind.epsilon / (K - 1))
        elif kind.variant == "ucb":
            bonus = self.z * np.sqrt(np.maximum(E - F * F, 0.0))
            mix = kind.ucb_mix
            p = _greedy_rows(F + bonus, 1.0 - mix + mix / K, mix / K)
        else:
            sd = np.sqrt(np.maximum(E - F * F, 0.0))
            p = _kernels.thompson_probs(F, np.ascontiguousarray(sd), self.draws)
        return apply_floor(p, self.floor)

    def distribution(self, f_pred, e_pred) -> ActionDistribution:
        p = self.probs(np.asarray(f_pred, float)[None, :], np.asarray(e_pred, float)[None, :])[0]
        return ActionDistribution(p / p.sum(), self.floor)


def action_probs(kind: PolicyKind, ctx: Context, f_pred, e_pred, rng: np.random.Generator) -> ActionDistribution:
    """Action distribution for one context from frozen predictions.

    ``ctx`` is accepted for interface symmetry; the built-in rules depend on the
    context only through ``f_pred`` and ``e_pred``. ``rng`` supplies Thompson
    draws.
    """
    f_pred = np.asarray(f_pred, dtype=float).reshape(-1)
    return Policy(kind, f_pred.shape[0], rng=rng).distribution(f_pred, e_pred)


def sample_action(dist: ActionDistribution, rng: np.random.Generator) -> int:
    """Draw a 0-based arm index by inverting the cumulative distribution."""
    return int(sample_actions(dist.probs[None, :], rng.random(1))[0])


def sample_actions(P: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized inverse-CDF sampling: row ``i`` uses uniform ``u[i]``."""
    cdf = np.cumsum(P, axis=1)
    arms = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(arms, P.shape[1] - 1)


def uniform_distribution(K: int) -> ActionDistribution:
    return ActionDistribution(np.full(K, 1.0 / K), floor=0.0)
