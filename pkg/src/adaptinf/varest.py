"""Plug-in estimates of the conditional score covariance.

For the GLM score ``c * (y - psi(theta @ z)) * z`` the conditional covariance
of one augmented score term, given the history, splits into

* ``E_X[ sum_a pe(a)^2 / P(a|X) * Cov(mdot | X, a) ]`` and
* ``Cov_X( sum_a pe(a) * E[mdot | X, a] )``.

With nuisance predictions ``f`` (mean) and ``e`` (second moment) the pieces
are estimated by ``g = c (f - psi) z`` (conditional mean of ``mdot``) and
``h = c^2 z z' (e - 2 f psi + psi^2)`` (its conditional second moment).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .env import Context, FeaturePool, Scenario, mean_table, sd_table
from .errors import DomainError
from .mathkit import DEFAULT_EIG_FLOOR, sym_inv_sqrt, symmetrize
from .mestim import ScoreData, WorkingModel, as_pe_vector, score_rows
from .policies import ActionDistribution, sample_actions

logger = logging.getLogger(__name__)


class TrueNuisance:
    """Exact outcome moments for pool contexts, usable in place of a snapshot."""

    def __init__(self, scn: Scenario, pool: FeaturePool, threshold: float | None = None):
        mu = mean_table(scn, pool)
        sd = sd_table(scn, pool)
        if threshold is None:
            self.F = mu
            self.E = mu * mu + sd * sd
        else:
            from .mathkit import normal_cdf

            self.F = 1.0 - normal_cdf((threshold - mu) / sd)
            self.E = self.F.copy()

    def predict_contexts(self, contexts: Sequence[Context]):
        idx = np.array([c.pool_index for c in contexts], dtype=np.int64)
        return self.F[idx], self.E[idx]


@dataclass(frozen=True, eq=False)
class GHPredictors:
    """Preliminary parameter plus nuisance predictor used for ``g`` and ``h``.

    ``snapshot`` is any object with ``predict_contexts(contexts) -> (F, E)``.
    """

    theta_bar: np.ndarray
    snapshot: object
    wm: WorkingModel

    def __post_init__(self):
        th = np.asarray(self.theta_bar, dtype=float).reshape(-1)
        if th.shape != (self.wm.d,) or not np.all(np.isfinite(th)):
            raise DomainError("theta_bar must be a finite vector of length d")
        object.__setattr__(self, "theta_bar", th)

    def tables(self, contexts: Sequence[Context]):
        """``g`` (n, K, d) and ``h`` (n, K, d, d) at the given contexts."""
        X = np.stack([c.features for c in contexts])
        F, E = self.snapshot.predict_contexts(contexts)
        return gh_tables(self.wm, self.theta_bar, self.wm.z_table(X), F, E)


def gh_tables(wm: WorkingModel, theta_bar, Z, F, E):
    """Conditional first and second moment tables of the score per (row, arm)."""
    eta = Z @ np.asarray(theta_bar, float)
    psi = wm.psi(eta)
    c = wm.c
    G = (c * (F - psi))[..., None] * Z
    H = (c * c * (E - 2.0 * F * psi + psi * psi))[..., None, None] * (Z[..., :, None] * Z[..., None, :])
    return G, H


def glm_g(gh: GHPredictors, ctx: Context, arm: int) -> np.ndarray:
    return gh.tables([ctx])[0][0, arm]


def glm_h(gh: GHPredictors, ctx: Context, arm: int) -> np.ndarray:
    """Conditional second moment of the score at ``(ctx, arm)``."""
    return gh.tables([ctx])[1][0, arm]


def nu_hat(gh: GHPredictors, pe, ctx: Context) -> np.ndarray:
    pe = as_pe_vector(pe, gh.wm.K)
    return np.einsum("k,kd->d", pe, gh.tables([ctx])[0][0])


def vhat_from_tables(pe: np.ndarray, G: np.ndarray, H: np.ndarray, P: np.ndarray,
                     weights: np.ndarray | None = None) -> np.ndarray:
    """Pool estimate of the score covariance from per-point tables.

    Parameters
    ----------
    pe : (K,) evaluation policy
    G : (n, K, d) conditional score means
    H : (n, K, d, d) conditional score second moments
    P : (n, K) deployed action probabilities at each point
    weights : (n,) optional multiplicities of the points
    """
    n = G.shape[0]
    if n == 0:
        raise DomainError("variance pool is empty")
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    W = w.sum()
    if not W > 0:
        raise DomainError("variance pool has zero total weight")
    ratio = pe[None, :] ** 2 / P
    cond_var = H - G[..., :, None] * G[..., None, :]
    within = np.einsum("n,nk,nkde->de", w, ratio, cond_var) / W
    nu = np.einsum("k,nkd->nd", pe, G)
    nu_bar = w @ nu / W
    between = np.einsum("n,nd,ne->de", w, nu, nu) / W - np.outer(nu_bar, nu_bar)
    return symmetrize(within + between)


def _propensity_table(propensity_fn, contexts, K):
    rows = []
    for c in contexts:
        d = propensity_fn(c)
        rows.append(d.probs if isinstance(d, ActionDistribution) else np.asarray(d, float))
    P = np.stack(rows)
    if P.shape[1] != K or np.any(~(P > 0)):
        raise DomainError("propensity map must give positive probabilities for every arm")
    return P


def vhat_pool(gh: GHPredictors, pe, pool_points: Sequence[Context],
              propensity_fn: Callable[[Context], ActionDistribution]) -> np.ndarray:
    """Score covariance estimate averaged over a pool of feature points."""
    if len(pool_points) == 0:
        raise DomainError("variance pool is empty")
    pe = as_pe_vector(pe, gh.wm.K)
    G, H = gh.tables(pool_points)
    P = _propensity_table(propensity_fn, pool_points, gh.wm.K)
    return vhat_from_tables(pe, G, H, P)


def vhat_naive(score_samples) -> np.ndarray:
    """Uncentered sample second moment ``(1/T) sum s s'`` of score vectors."""
    S = np.atleast_2d(np.asarray(score_samples, dtype=float))
    if S.shape[0] == 0:
        raise DomainError("need at least one score sample")
    return symmetrize(S.T @ S / S.shape[0])


@dataclass(frozen=True, eq=False)
class VHatSequence:
    """Block-constant covariance estimates.

    Block ``b`` covers times ``starts[b] <= t < starts[b+1]`` and its matrix is
    built only from information available before ``starts[b]``. Inactive
    blocks (no nuisance training data yet) get a zero stabilizing weight.
    """

    starts: np.ndarray
    matrices: np.ndarray
    inv_sqrt: np.ndarray
    active: np.ndarray = None

    @classmethod
    def from_matrices(cls, starts, matrices, floor: float = DEFAULT_EIG_FLOOR, active=None) -> "VHatSequence":
        starts = np.asarray(starts, dtype=np.int64)
        mats = np.asarray(matrices, dtype=float)
        if starts.ndim != 1 or starts.shape[0] != mats.shape[0] or starts.shape[0] == 0:
            raise DomainError("need one block start per matrix")
        if np.any(np.diff(starts) <= 0):
            raise DomainError("block starts must be strictly increasing")
        active = np.ones(starts.shape[0], bool) if active is None else np.asarray(active, bool)
        if not active.any():
            raise DomainError("at least one block must be active")
        inv = np.stack([sym_inv_sqrt(symmetrize(m), floor) if a else np.zeros_like(m)
                        for m, a in zip(mats, active)])
        return cls(starts, np.stack([symmetrize(m) for m in mats]), inv, active)

    @classmethod
    def constant(cls, matrix, floor: float = DEFAULT_EIG_FLOOR) -> "VHatSequence":
        return cls.from_matrices([1], np.asarray(matrix, float)[None], floor)

    def block_of(self, t) -> np.ndarray:
        b = np.searchsorted(self.starts, np.asarray(t), side="right") - 1
        if np.any(b < 0):
            raise DomainError("time precedes the first block")
        return b


def mc_score_variance(wm: WorkingModel, theta, frozen_policy, pe, scn: Scenario, pool: FeaturePool,
                      snap, n_mc: int, rng: np.random.Generator, threshold: float | None = None) -> np.ndarray:
    """Brute-force covariance of the augmented score under a frozen policy.

    Draws ``n_mc`` fresh (context, arm, outcome) triples. ``frozen_policy`` is
    either a callable ``Context -> ActionDistribution`` or an (n_pool, K)
    table of probabilities. ``snap`` supplies ``predict_contexts``.
    Outcomes are binarized at ``threshold`` when given.
    """
    if n_mc < 1000:
        raise DomainError("n_mc must be at least 1000")
    pe = as_pe_vector(pe, wm.K)
    idx = rng.integers(pool.n, size=n_mc)
    uniq, inv = np.unique(idx, return_inverse=True)
    ctxs = [pool.context(int(i)) for i in uniq]
    if callable(frozen_policy):
        P_u = _propensity_table(frozen_policy, ctxs, wm.K)
    else:
        P_u = np.asarray(frozen_policy, float)[uniq]
    F_u, _ = snap.predict_contexts(ctxs)
    P = P_u[inv]
    arm = sample_actions(P, rng.random(n_mc))
    mu = mean_table(scn, pool)[idx, arm]
    sd = sd_table(scn, pool)[idx, arm]
    y = mu + sd * rng.standard_normal(n_mc)
    if threshold is not None:
        y = (y > threshold).astype(float)
    Z = wm.z_table(pool.rows[uniq])[inv]
    data = ScoreData(Z, F_u[inv], pe, arm, y, P[np.arange(n_mc), arm])
    S = score_rows(wm, theta, data)
    Sc = S - S.mean(axis=0)
    return symmetrize(Sc.T @ Sc / n_mc)


def enumerate_score_variance(wm: WorkingModel, theta, pe, Z, F, P, values, probs) -> np.ndarray:
    """Exact covariance of the augmented score on a finite instance.

    Contexts are equally likely rows of ``Z`` (n, K, d); arms follow ``P``
    (n, K); outcome ``values[i, a, v]`` occurs with probability
    ``probs[i, a, v]``. ``F`` (n, K) is the augmentation prediction.
    """
    pe = as_pe_vector(pe, wm.K)
    Z = np.asarray(Z, float)
    n, K, d = Z.shape
    values = np.asarray(values, float)
    probs = np.asarray(probs, float)
    if not np.allclose(probs.sum(axis=2), 1.0, atol=1e-12) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
        raise DomainError("arm and outcome probabilities must sum to one")
    V = values.shape[2]
    ii, aa, vv = np.meshgrid(np.arange(n), np.arange(K), np.arange(V), indexing="ij")
    ii, aa, vv = ii.ravel(), aa.ravel(), vv.ravel()
    weight = P[ii, aa] * probs[ii, aa, vv] / n
    data = ScoreData(Z[ii], np.asarray(F, float)[ii], pe, aa, values[ii, aa, vv], P[ii, aa])
    S = score_rows(wm, theta, data)
    mean = weight @ S
    Sc = S - mean
    return symmetrize(np.einsum("m,md,me->de", weight, Sc, Sc))
