"""Working models, augmented IPW score equations, and their solvers.

Objectives are stored as rewards (the negated loss), so the target parameter
maximizes the expected objective. Both families share the score form
``c * (y - psi(theta @ z)) * z``: ``c = 2`` and ``psi`` the identity for the
linear model, ``c = 1`` and ``psi`` the logistic function for the logistic
model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

from .env import Context, FeaturePool, Scenario, mean_table, sd_table
from .errors import DomainError, FloorViolationError, SolverError
from .history import History, Observation
from .mathkit import normal_cdf
from .nuisance import NuisanceSnapshot
from .policies import ActionDistribution

LINEAR = "linear"
LOGISTIC = "logistic"
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
MAX_HALVINGS = 30


@dataclass(frozen=True, eq=False)
class WorkingModel:
    """Parametric family under inference.

    Attributes
    ----------
    family : str
        ``"linear"`` or ``"logistic"``.
    feature_fn : callable
        ``feature_fn(X, arm) -> (n, d)`` array of regressors for raw feature
        rows ``X`` of shape (n, p) and a 0-based arm.
    d : int
        Parameter dimension.
    K : int
        Number of arms.
    name : str
        Label for output tables.
    """

    family: str
    feature_fn: Callable[[np.ndarray, int], np.ndarray]
    d: int
    K: int
    name: str = "custom"

    def __post_init__(self):
        if self.family not in (LINEAR, LOGISTIC):
            raise DomainError(f"unknown family {self.family!r}")

    @property
    def c(self) -> float:
        return 2.0 if self.family == LINEAR else 1.0

    def psi(self, eta):
        return eta if self.family == LINEAR else expit(eta)

    def psi_prime(self, eta):
        if self.family == LINEAR:
            return np.ones_like(eta)
        s = expit(eta)
        return s * (1.0 - s)

    def z(self, ctx: Context, arm: int) -> np.ndarray:
        return self.z_rows(ctx.features[None, :], arm)[0]

    def z_rows(self, X: np.ndarray, arm: int) -> np.ndarray:
        out = np.asarray(self.feature_fn(np.asarray(X, float), int(arm)), dtype=float)
        if out.shape != (X.shape[0], self.d):
            raise DomainError(f"feature map returned shape {out.shape}, expected {(X.shape[0], self.d)}")
        return out

    def z_table(self, X: np.ndarray) -> np.ndarray:
        """Regressors for every row and arm, shape (n, K, d)."""
        X = np.atleast_2d(np.asarray(X, float))
        return np.stack([self.z_rows(X, a) for a in range(self.K)], axis=1)

    def check_outcome(self, y) -> None:
        if self.family == LOGISTIC:
            y = np.asarray(y)
            if np.any((y < 0) | (y > 1)):
                raise DomainError("logistic working model needs outcomes in [0, 1]")


def onehot_model(K: int, family: str = LINEAR) -> WorkingModel:
    """One coefficient per arm: ``z(x, a) = e_a``."""

    def fn(X, arm):
        out = np.zeros((X.shape[0], K))
        out[:, arm] = 1.0
        return out

    return WorkingModel(family, fn, K, K, name="onehot")


def onehot_features_model(K: int, p: int, family: str = LINEAR) -> WorkingModel:
    """Per-arm intercept and per-arm slopes on the raw features."""

    def fn(X, arm):
        out = np.zeros((X.shape[0], K * (1 + p)))
        base = arm * (1 + p)
        out[:, base] = 1.0
        out[:, base + 1: base + 1 + p] = X
        return out

    return WorkingModel(family, fn, K * (1 + p), K, name="onehot_features")


def dose_model(doses, family: str = LINEAR) -> WorkingModel:
    """Intercept plus a slope on a per-arm scalar dose: ``z(x, a) = (1, dose[a])``."""
    doses = np.asarray(doses, dtype=float)

    def fn(X, arm):
        out = np.ones((X.shape[0], 2))
        out[:, 1] = doses[arm]
        return out

    return WorkingModel(family, fn, 2, doses.shape[0], name="dose")


# single-observation objective and derivatives

def m_value(wm: WorkingModel, theta, ctx: Context, arm: int, y: float) -> float:
    wm.check_outcome(y)
    eta = float(wm.z(ctx, arm) @ np.asarray(theta, float))
    if wm.family == LINEAR:
        return -((y - eta) ** 2)
    return y * eta - float(np.logaddexp(0.0, eta))


def m_grad(wm: WorkingModel, theta, ctx: Context, arm: int, y: float) -> np.ndarray:
    wm.check_outcome(y)
    z = wm.z(ctx, arm)
    eta = z @ np.asarray(theta, float)
    return wm.c * (y - wm.psi(eta)) * z


def m_hess(wm: WorkingModel, theta, ctx: Context, arm: int, y: float) -> np.ndarray:
    wm.check_outcome(y)
    z = wm.z(ctx, arm)
    eta = z @ np.asarray(theta, float)
    return -wm.c * wm.psi_prime(eta) * np.outer(z, z)


def _m_rows(wm: WorkingModel, eta, y):
    if wm.family == LINEAR:
        return -((y - eta) ** 2)
    return y * eta - np.logaddexp(0.0, eta)


def as_pe_vector(pe, K: int) -> np.ndarray:
    """Evaluation-policy probabilities as a length-K vector."""
    if isinstance(pe, ActionDistribution):
        pe = pe.probs
    pe = np.asarray(pe, dtype=float).reshape(-1)
    if pe.shape != (K,) or np.any(pe < 0) or abs(pe.sum() - 1.0) > 1e-10:
        raise DomainError(f"evaluation policy must be a probability vector of length {K}")
    return pe


@dataclass(eq=False)
class ScoreData:
    """Vectorized inputs to the augmented score.

    Attributes
    ----------
    Z : (T, K, d) regressors at the observed context for every arm
    F : (T, K) predicted means from the measurable snapshot
    pe : (K,) evaluation policy
    arm : (T,) chosen arm
    y : (T,) outcome
    prop : (T,) logged propensity of the chosen arm
    """

    Z: np.ndarray
    F: np.ndarray
    pe: np.ndarray
    arm: np.ndarray
    y: np.ndarray
    prop: np.ndarray

    def __post_init__(self):
        if np.any(~(self.prop > 0)):
            raise FloorViolationError("logged propensity of the chosen arm must be positive")
        self.T = self.y.shape[0]
        rows = np.arange(self.T)
        self.w = self.pe[self.arm] / self.prop
        self.z_chosen = self.Z[rows, self.arm]
        self.f_chosen = self.F[rows, self.arm]

    def subset(self, idx) -> "ScoreData":
        return ScoreData(self.Z[idx], self.F[idx], self.pe, self.arm[idx], self.y[idx], self.prop[idx])


def predictions_for(history: History, snapshots: Mapping[int, NuisanceSnapshot]) -> np.ndarray:
    """Predicted means (T, K) using each observation's own snapshot."""
    F = np.zeros((len(history), history.K))
    for sid in np.unique(history.snapshot_id):
        snap = snapshots[int(sid)]
        sel = history.snapshot_id == sid
        if np.any(history.t[sel] < snap.snapshot_time):
            raise DomainError(f"snapshot {sid} was taken after some of its observations")
        F[sel] = snap.predict_features(history.features[sel])[0]
    return F


def score_data(wm: WorkingModel, history: History, snapshots, pe) -> ScoreData:
    if len(history) == 0:
        raise DomainError("history is empty")
    wm.check_outcome(history.y)
    if np.any(history.propensity < history.floor - 1e-12):
        raise FloorViolationError("logged propensity below its declared floor")
    return ScoreData(
        wm.z_table(history.features),
        predictions_for(history, snapshots),
        as_pe_vector(pe, wm.K),
        history.arm,
        history.y,
        history.propensity,
    )


def score_rows(wm: WorkingModel, theta, sd: ScoreData) -> np.ndarray:
    """Per-observation augmented score, shape (T, d)."""
    theta = np.asarray(theta, float)
    eta = sd.Z @ theta
    direct = np.einsum("k,tk,tkd->td", sd.pe, sd.F - wm.psi(eta), sd.Z)
    correction = (sd.w * (sd.y - sd.f_chosen))[:, None] * sd.z_chosen
    return wm.c * (direct + correction)


def score_jac_rows(wm: WorkingModel, theta, sd: ScoreData) -> np.ndarray:
    """Per-observation derivative of the score in theta, shape (T, d, d)."""
    eta = sd.Z @ np.asarray(theta, float)
    wts = sd.pe * wm.psi_prime(eta)
    return -wm.c * np.einsum("tk,tkd,tke->tde", wts, sd.Z, sd.Z)


def score_jac_sum(wm: WorkingModel, theta, sd: ScoreData, groups=None, n_groups=None) -> np.ndarray:
    """Sum of score derivatives, optionally per group (returns (G, d, d))."""
    eta = sd.Z @ np.asarray(theta, float)
    wts = sd.pe * wm.psi_prime(eta)
    if groups is None:
        return -wm.c * np.einsum("tk,tkd,tke->de", wts, sd.Z, sd.Z)
    K, d = sd.Z.shape[1], sd.Z.shape[2]
    outer = np.einsum("tk,tkd,tke->tde", wts, sd.Z, sd.Z).reshape(sd.T, d * d)
    out = np.zeros((n_groups, d * d))
    np.add.at(out, groups, outer)
    return -wm.c * out.reshape(n_groups, d, d)


def objective_rows(wm: WorkingModel, theta, sd: ScoreData) -> np.ndarray:
    eta = sd.Z @ np.asarray(theta, float)
    direct = (sd.pe * _m_rows(wm, eta, sd.F)).sum(axis=1)
    eta_c = eta[np.arange(sd.T), sd.arm]
    corr = sd.w * (_m_rows(wm, eta_c, sd.y) - _m_rows(wm, eta_c, sd.f_chosen))
    return direct + corr


def _single(wm, obs: Observation, snap: NuisanceSnapshot, pe) -> ScoreData:
    if snap.snapshot_time > obs.t:
        raise DomainError("snapshot is not measurable before the observation")
    wm.check_outcome(obs.y)
    prop = obs.logged_dist[obs.arm]
    if not prop > 0 or prop < obs.logged_dist.floor - 1e-12:
        raise FloorViolationError(f"logged propensity {prop} violates floor {obs.logged_dist.floor}")
    F = snap.predict_features(obs.ctx.features[None, :])[0]
    return ScoreData(
        wm.z_table(obs.ctx.features[None, :]), F, as_pe_vector(pe, wm.K),
        np.array([obs.arm]), np.array([obs.y], float), np.array([prop]),
    )


def score_term(wm: WorkingModel, theta, obs: Observation, snap: NuisanceSnapshot, pe) -> np.ndarray:
    """Augmented IPW score of one observation."""
    return score_rows(wm, theta, _single(wm, obs, snap, pe))[0]


def score_grad_term(wm: WorkingModel, theta, obs: Observation, snap: NuisanceSnapshot, pe) -> np.ndarray:
    return score_jac_rows(wm, theta, _single(wm, obs, snap, pe))[0]


def maipwm_objective(wm: WorkingModel, theta, history: History, snapshots, pe) -> float:
    """Augmented IPW objective summed over the history."""
    return float(objective_rows(wm, theta, score_data(wm, history, snapshots, pe)).sum())


def damped_newton(fun, theta0, T: int, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
    """Solve ``r(theta) = 0`` where ``fun(theta) -> (r, J)``.

    Steps are halved (up to 30 times) until the Euclidean residual norm
    decreases. Convergence is declared when ``max|r| / T <= tol``.
    """
    theta = np.array(theta0, dtype=float)
    r, J = fun(theta)
    res = np.max(np.abs(r)) / T
    for it in range(max_iter):
        if res <= tol:
            return theta, res, it
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
        merit = np.linalg.norm(r)
        lam = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = theta + lam * step
            rc, Jc = fun(cand)
            if np.all(np.isfinite(rc)) and np.linalg.norm(rc) < merit:
                break
            lam *= 0.5
        else:
            raise SolverError("step halving failed to reduce the residual", res, it)
        theta, r, J = cand, rc, Jc
        res = np.max(np.abs(r)) / T
    if res <= tol:
        return theta, res, max_iter
    raise SolverError("Newton iteration did not converge", res, max_iter)


def solve_tilde_from_data(wm: WorkingModel, sd: ScoreData, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    def fun(theta):
        return score_rows(wm, theta, sd).sum(axis=0), score_jac_sum(wm, theta, sd)

    theta, _, _ = damped_newton(fun, np.zeros(wm.d), sd.T, tol, max_iter)
    return theta


def solve_tilde_theta(wm: WorkingModel, history: History, snapshots, pe,
                      tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Root of the summed augmented score, by damped Newton from zero."""
    return solve_tilde_from_data(wm, score_data(wm, history, snapshots, pe), tol, max_iter)


def ipw_fit_arrays(wm: WorkingModel, Zc: np.ndarray, y: np.ndarray, w: np.ndarray,
                   tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Weighted M-estimate on chosen-arm regressors ``Zc`` (T, d) with sandwich covariance."""
    T = y.shape[0]

    def fun(theta):
        eta = Zc @ theta
        r = wm.c * ((w * (y - wm.psi(eta)))[:, None] * Zc).sum(axis=0)
        J = -wm.c * np.einsum("t,td,te->de", w * wm.psi_prime(eta), Zc, Zc)
        return r, J

    theta = np.zeros(wm.d)
    _, J0 = fun(theta)
    if np.linalg.matrix_rank(J0) < wm.d:
        raise SolverError("weighted information matrix is singular", float("nan"), 0)
    theta, _, _ = damped_newton(fun, theta, T, tol, max_iter)
    eta = Zc @ theta
    grads = wm.c * (y - wm.psi(eta))[:, None] * Zc
    J = -wm.c * np.einsum("t,td,te->de", w * wm.psi_prime(eta), Zc, Zc) / T
    omega = np.einsum("t,td,te->de", w * w, grads, grads) / T
    Jinv = np.linalg.inv(J)
    cov = Jinv @ omega @ Jinv.T / T
    return theta, 0.5 * (cov + cov.T)


def ipw_fit(wm: WorkingModel, history: History, pe, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Importance-weighted M-estimate and its sandwich covariance."""
    if len(history) == 0:
        raise DomainError("history is empty")
    wm.check_outcome(history.y)
    pe = as_pe_vector(pe, wm.K)
    prop = history.propensity
    if np.any(~(prop > 0)):
        raise FloorViolationError("logged propensity must be positive")
    Zc = wm.z_table(history.features)[np.arange(len(history)), history.arm]
    return ipw_fit_arrays(wm, Zc, history.y, pe[history.arm] / prop, tol, max_iter)


def expected_outcome_table(scn: Scenario, pool: FeaturePool, family: str, threshold: float | None = None):
    """Per-row, per-arm target of ``psi``: the mean, or P(Y > threshold) for logistic."""
    mu = mean_table(scn, pool)
    if family == LINEAR:
        return mu
    if threshold is None:
        raise DomainError("logistic projection needs a binarization threshold")
    return 1.0 - normal_cdf((threshold - mu) / sd_table(scn, pool))


def projection_oracle(wm: WorkingModel, scn: Scenario, pool: FeaturePool, pe,
                      threshold: float | None = None, tol: float = 1e-10) -> np.ndarray:
    """Maximizer of the exact population objective over the pool under ``pe``."""
    pe = as_pe_vector(pe, wm.K)
    if scn.K != wm.K:
        raise DomainError("scenario and working model disagree on the number of arms")
    Z = wm.z_table(pool.rows)
    target = expected_outcome_table(scn, pool, wm.family, threshold)
    n = pool.n
    gram = np.einsum("k,nkd,nke->de", pe, Z, Z) / n
    if np.linalg.matrix_rank(gram) < wm.d:
        raise DomainError("design is singular under the evaluation policy")
    if wm.family == LINEAR:
        rhs = np.einsum("k,nk,nkd->d", pe, target, Z) / n
        return np.linalg.solve(gram, rhs)

    def fun(theta):
        eta = Z @ theta
        r = np.einsum("k,nk,nkd->d", pe, target - wm.psi(eta), Z)
        J = -np.einsum("k,nk,nkd,nke->de", pe, wm.psi_prime(eta), Z, Z)
        return r, J

    theta, _, _ = damped_newton(fun, np.zeros(wm.d), n, tol, 200)
    return theta
