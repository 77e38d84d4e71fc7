"""Variance-stabilized estimator, ellipsoidal confidence regions, and the pipeline.

The stabilized estimator solves ``sum_t W_t s_t(theta) = 0`` where ``W_t`` is
the inverse square root of a history-measurable estimate of the conditional
score covariance. With ``Bm = T**-0.5 * sum_t W_t sdot_t(theta_hat)`` the
region is ``{theta : |Bm (theta_hat - theta)|**2 <= chi2_quantile(d, 1 - alpha)}``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AdaptInfError, DomainError, SolverError
from .history import History
from .mathkit import DEFAULT_EIG_FLOOR, chi2_quantile, sym_inv_sqrt, symmetrize
from .mestim import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    ScoreData,
    WorkingModel,
    as_pe_vector,
    damped_newton,
    ipw_fit_arrays,
    score_data,
    score_jac_sum,
    score_rows,
    solve_tilde_from_data,
)
from .simulate import Trajectory
from .varest import VHatSequence, gh_tables, vhat_from_tables, vhat_naive

logger = logging.getLogger(__name__)

METHODS = ("maipwm_external", "maipwm_splitting", "maipwm_reuse", "maipwm_naive", "ipw")
_POOL_METHODS = ("maipwm_external", "maipwm_splitting", "maipwm_reuse")


@dataclass(frozen=True, eq=False)
class ConfidenceRegion:
    """Ellipsoid ``{theta : |shape @ (center - theta)|**2 <= radius}``."""

    center: np.ndarray
    shape: np.ndarray
    radius: float
    alpha: float
    singular: bool = False

    @property
    def d(self) -> int:
        return self.center.shape[0]

    def contains(self, theta) -> bool:
        return region_contains(self, theta)


def _is_singular(m: np.ndarray) -> bool:
    s = np.linalg.svd(m, compute_uv=False)
    return bool(s.size == 0 or s[-1] <= 1e-12 * max(s[0], 1e-300))


def make_region(center, shape, alpha: float) -> ConfidenceRegion:
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    center = np.asarray(center, float)
    shape = np.asarray(shape, float)
    return ConfidenceRegion(center, shape, chi2_quantile(center.shape[0], 1.0 - alpha), alpha,
                            _is_singular(shape))


def region_contains(r: ConfidenceRegion, theta) -> bool:
    theta = np.asarray(theta, float).reshape(-1)
    if theta.shape != r.center.shape:
        raise DomainError(f"theta has dimension {theta.shape[0]}, region has {r.d}")
    v = r.shape @ (r.center - theta)
    return bool(v @ v <= r.radius)


def marginal_interval(r: ConfidenceRegion, eta, radius: float | None = None) -> tuple[float, float]:
    """Projection of the region onto the direction ``eta``.

    ``radius`` defaults to the region's own; pass ``chi2_quantile(1, 1 - alpha)``
    for a pointwise interval on the single contrast.
    """
    eta = np.asarray(eta, float).reshape(-1)
    if eta.shape != r.center.shape:
        raise DomainError("contrast has the wrong dimension")
    if r.singular:
        raise DomainError("region shape is singular; interval is unbounded")
    rad = r.radius if radius is None else float(radius)
    # eta' (B'B)^{-1} eta = |B^{-T} eta|^2
    v = np.linalg.solve(r.shape.T, eta)
    half = math.sqrt(rad * float(v @ v))
    mid = float(eta @ r.center)
    return mid - half, mid + half


def region_from_covariance(center, cov, alpha: float) -> ConfidenceRegion:
    """Wald region for an estimate with covariance ``cov``."""
    cov = symmetrize(cov)
    top = float(np.max(np.linalg.eigvalsh(cov))) if cov.size else 0.0
    floor = max(top * 1e-12, 1e-300)
    return make_region(center, sym_inv_sqrt(cov, floor), alpha)


def _group_sum(X: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    out = np.zeros((n_groups,) + X.shape[1:])
    np.add.at(out, groups, X)
    return out


def solve_hat_from_data(wm: WorkingModel, sd: ScoreData, groups: np.ndarray, inv_sqrt: np.ndarray,
                        theta0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Root of ``sum_t W[groups[t]] s_t(theta)``; returns ``(theta, residual)``."""
    nb = inv_sqrt.shape[0]

    def fun(theta):
        S = _group_sum(score_rows(wm, theta, sd), groups, nb)
        J = score_jac_sum(wm, theta, sd, groups, nb)
        return np.einsum("bde,be->d", inv_sqrt, S), np.einsum("bde,bef->df", inv_sqrt, J)

    theta, res, _ = damped_newton(fun, theta0, sd.T, tol, max_iter)
    return theta, res


def shape_from_data(wm: WorkingModel, sd: ScoreData, groups, inv_sqrt, theta_hat) -> np.ndarray:
    """Region shape; normalized by the number of rounds carrying nonzero weight."""
    J = score_jac_sum(wm, theta_hat, sd, groups, inv_sqrt.shape[0])
    weighted = np.any(inv_sqrt != 0, axis=(1, 2))
    n_eff = int(np.sum(weighted[groups]))
    return np.einsum("bde,bef->df", inv_sqrt, J) / math.sqrt(n_eff)


def solve_hat_theta(wm: WorkingModel, history: History, snapshots, pe, vhats: VHatSequence,
                    tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Variance-stabilized estimator, started from the unweighted root."""
    sd = score_data(wm, history, snapshots, pe)
    theta0 = solve_tilde_from_data(wm, sd, tol, max_iter)
    theta, _ = solve_hat_from_data(wm, sd, vhats.block_of(history.t), vhats.inv_sqrt, theta0, tol, max_iter)
    return theta


def build_region(wm: WorkingModel, history: History, snapshots, pe, vhats: VHatSequence, theta_hat,
                 alpha: float) -> ConfidenceRegion:
    sd = score_data(wm, history, snapshots, pe)
    shape = shape_from_data(wm, sd, vhats.block_of(history.t), vhats.inv_sqrt, np.asarray(theta_hat, float))
    return make_region(theta_hat, shape, alpha)


@dataclass(eq=False)
class CheckpointResult:
    """Estimate and region for one method at one checkpoint."""

    method: str
    checkpoint: int
    n_used: int
    theta_tilde: np.ndarray | None = None
    theta_hat: np.ndarray | None = None
    region: ConfidenceRegion | None = None
    residual: float = float("nan")
    n_identity_blocks: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.region is not None


@dataclass
class PipelineOptions:
    external_ratio: float = 1.0
    vhat_floor: float = DEFAULT_EIG_FLOOR
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    z_table: np.ndarray | None = field(default=None, repr=False)


def _pool_vhats(method, traj: Trajectory, wm, pe, theta_bar, blocks, T_c, opts, Ztab):
    """Per-block covariance estimates for the pool-based methods."""
    n = traj.pool.n
    starts = traj.block_starts()
    trained = np.all(traj.block_arm_counts()[:, pe > 0] > 0, axis=1)
    mats = []
    active = []
    n_identity = 0
    if method == "maipwm_external":
        n_ext = math.ceil(opts.external_ratio * T_c)
        if n_ext > traj.external.shape[0]:
            raise DomainError(f"external pool holds {traj.external.shape[0]} points, need {n_ext}")
        ext_w = np.bincount(traj.external[:n_ext], minlength=n).astype(float)
    times = traj.times
    for b in blocks:
        active.append(bool(trained[b]))
        if method == "maipwm_external":
            w = ext_w
        else:
            before = times < starts[b]
            if method == "maipwm_splitting":
                before &= traj.split == 1
            w = np.bincount(traj.pool_index[before], minlength=n).astype(float)
        rows = np.flatnonzero(w)
        if rows.size == 0 or not trained[b]:
            # untrained blocks carry zero weight, so their matrix is never used
            n_identity += int(trained[b])
            mats.append(np.eye(wm.d))
            continue
        G, H = gh_tables(wm, theta_bar, Ztab[rows], traj.block_F[b, rows], traj.block_E[b, rows])
        mats.append(vhat_from_tables(pe, G, H, traj.block_P[b, rows], w[rows]))
    if n_identity:
        logger.warning("%s: %d block(s) had an empty variance pool; identity used", method, n_identity)
    active = np.array(active)
    if not active.any():
        raise DomainError("no block has nuisance training data for every evaluated arm")
    return np.stack(mats), active, n_identity


def run_checkpoint(method: str, traj: Trajectory, wm: WorkingModel, pe, alpha: float, T_c: int,
                   opts: PipelineOptions | None = None) -> CheckpointResult:
    """Estimate with one method using the rounds up to ``T_c``."""
    if method not in METHODS:
        raise DomainError(f"unknown method {method!r}")
    opts = opts or PipelineOptions()
    pe = as_pe_vector(pe, wm.K)
    Ztab = opts.z_table if opts.z_table is not None else wm.z_table(traj.pool.rows)
    mask = traj.times <= T_c
    if method == "maipwm_splitting":
        mask &= traj.split == 0
    sel = np.flatnonzero(mask)
    res = CheckpointResult(method, int(T_c), int(sel.size))
    if sel.size == 0:
        res.error = "no observations available"
        return res
    rows = traj.pool_index[sel]
    arm = traj.arm[sel]
    y = traj.y[sel]
    prop = traj.probs[sel, arm]
    try:
        if method == "ipw":
            Zc = Ztab[rows, arm]
            theta, cov = ipw_fit_arrays(wm, Zc, y, pe[arm] / prop, opts.tol, opts.max_iter)
            res.theta_tilde = res.theta_hat = theta
            res.region = region_from_covariance(theta, cov, alpha)
            res.residual = 0.0
            return res
        block = traj.block[sel]
        sd = ScoreData(Ztab[rows], traj.block_F[block, rows], pe, arm, y, prop)
        theta_t = solve_tilde_from_data(wm, sd, opts.tol, opts.max_iter)
        res.theta_tilde = theta_t
        if method == "maipwm_naive":
            V = vhat_naive(score_rows(wm, theta_t, sd))
            inv = sym_inv_sqrt(V, opts.vhat_floor)[None]
            groups = np.zeros(sd.T, np.int64)
        else:
            blocks, groups = np.unique(block, return_inverse=True)
            mats, active, res.n_identity_blocks = _pool_vhats(method, traj, wm, pe, theta_t, blocks, T_c,
                                                              opts, Ztab)
            inv = VHatSequence.from_matrices(traj.block_starts()[blocks], mats, opts.vhat_floor, active).inv_sqrt
        theta_h, res.residual = solve_hat_from_data(wm, sd, groups, inv, theta_t, opts.tol, opts.max_iter)
        res.theta_hat = theta_h
        res.region = make_region(theta_h, shape_from_data(wm, sd, groups, inv, theta_h), alpha)
    except (AdaptInfError, np.linalg.LinAlgError) as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def run_pipeline(method: str, traj: Trajectory, wm: WorkingModel, pe, alpha: float, checkpoints,
                 opts: PipelineOptions | None = None) -> list[CheckpointResult]:
    """Estimate with ``method`` at every checkpoint, each on its own data prefix."""
    opts = opts or PipelineOptions()
    if opts.z_table is None:
        opts = PipelineOptions(opts.external_ratio, opts.vhat_floor, opts.tol, opts.max_iter,
                               wm.z_table(traj.pool.rows))
    out = []
    for T_c in checkpoints:
        if T_c > traj.T:
            raise DomainError(f"checkpoint {T_c} exceeds trajectory length {traj.T}")
        out.append(run_checkpoint(method, traj, wm, pe, alpha, int(T_c), opts))
    return out
