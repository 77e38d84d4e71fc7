"""Semi-synthetic bandit environment.

A fixed pool of feature rows carries a surrogate mean ``f(x)`` and variance
scale ``v(x)``. Arm ``a`` (0-based) has mean ``beta1[a] + beta2[a] * f(x)``
and Gaussian noise that is either homoskedastic or scaled by ``gamma[a] * v(x)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DegenerateNoiseError, DomainError, IngestionError

logger = logging.getLogger(__name__)

HOMOSKEDASTIC = "homoskedastic"
HETEROSKEDASTIC = "heteroskedastic"


@dataclass(frozen=True, eq=False)
class Context:
    """One feature vector together with its row index in the pool."""

    features: np.ndarray
    pool_index: int = -1

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise DomainError("context features must be finite")
        object.__setattr__(self, "features", x)


@dataclass(frozen=True, eq=False)
class SplitFlag:
    zeta: int

    def __post_init__(self):
        if self.zeta not in (0, 1):
            raise DomainError(f"split flag must be 0 or 1, got {self.zeta}")


@dataclass(frozen=True, eq=False)
class Scenario:
    """Generative description of arm means and outcome noise.

    Attributes
    ----------
    K : int
        Number of arms.
    beta1, beta2 : numpy.ndarray
        Per-arm intercepts and slopes on the surrogate mean ``f(x)``.
    gamma : numpy.ndarray
        Per-arm variance multipliers applied to ``v(x)`` in heteroskedastic mode.
    base_noise_sd : float
        Noise standard deviation in homoskedastic mode.
    mode : str
        ``"homoskedastic"`` or ``"heteroskedastic"``.
    binarize_threshold : float or None
        Threshold used when outcomes are converted to binary labels.
    name : str
        Label used in output tables.
    """

    K: int
    beta1: np.ndarray
    beta2: np.ndarray
    gamma: np.ndarray = None
    base_noise_sd: float = 1.0
    mode: str = HOMOSKEDASTIC
    binarize_threshold: float | None = None
    name: str = "custom"

    def __post_init__(self):
        K = int(self.K)
        if K < 1:
            raise DomainError("scenario needs at least one arm")
        b1 = np.asarray(self.beta1, dtype=float).reshape(-1)
        b2 = np.asarray(self.beta2, dtype=float).reshape(-1)
        g = np.ones(K) if self.gamma is None else np.asarray(self.gamma, dtype=float).reshape(-1)
        for label, vec in (("beta1", b1), ("beta2", b2), ("gamma", g)):
            if vec.shape != (K,):
                raise DomainError(f"{label} must have length K={K}, got {vec.shape[0]}")
            if not np.all(np.isfinite(vec)):
                raise DomainError(f"{label} must be finite")
        if self.mode not in (HOMOSKEDASTIC, HETEROSKEDASTIC):
            raise DomainError(f"unknown noise mode {self.mode!r}")
        if self.mode == HETEROSKEDASTIC and np.any(g <= 0):
            raise DomainError("gamma entries must be positive in heteroskedastic mode")
        if self.mode == HOMOSKEDASTIC and not self.base_noise_sd > 0:
            raise DegenerateNoiseError("base_noise_sd must be positive")
        for name, val in (("beta1", b1), ("beta2", b2), ("gamma", g)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "K", K)


_BETA1 = (0.0, 0.0, 1.0, 2.0, 2.0, 3.0, 4.0, 5.0)
_BETA2 = (1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0)


def builtin_scenario(key: int | str, arms: int | None = None) -> Scenario:
    """Return one of the named scenarios, optionally truncated to ``arms`` arms.

    ``1``: homoskedastic, unit noise. ``2``: variance ``0.2 * v(x)`` on every
    arm. ``3``: variance ``0.2 * (1,2,3,4,5,5,5,5)[a] * v(x)``. ``4``: no
    dependence on ``f``, unit noise. ``"zero_margin"``: two arms with identical
    means, the hard case for adaptive policies.
    """
    key = str(key)
    if key == "1":
        scn = Scenario(8, _BETA1, _BETA2, name="1")
    elif key == "2":
        scn = Scenario(8, _BETA1, _BETA2, 0.2 * np.ones(8), mode=HETEROSKEDASTIC, name="2")
    elif key == "3":
        gamma = 0.2 * np.array([1, 2, 3, 4, 5, 5, 5, 5], dtype=float)
        scn = Scenario(8, _BETA1, _BETA2, gamma, mode=HETEROSKEDASTIC, name="3")
    elif key == "4":
        scn = Scenario(8, _BETA1, np.zeros(8), name="4")
    elif key == "zero_margin":
        scn = Scenario(2, (1.0, 1.0), (1.0, 1.0), name="zero_margin")
    else:
        raise DomainError(f"unknown scenario {key!r}")
    if arms is not None:
        if not 1 <= arms <= scn.K:
            raise DomainError(f"arms must lie in [1, {scn.K}], got {arms}")
        scn = Scenario(
            arms,
            scn.beta1[:arms],
            scn.beta2[:arms],
            scn.gamma[:arms],
            scn.base_noise_sd,
            scn.mode,
            scn.binarize_threshold,
            name=scn.name if arms == scn.K else f"{scn.name}_K{arms}",
        )
    return scn


@dataclass(frozen=True, eq=False)
class FeaturePool:
    """Immutable feature pool with surrogate mean and variance scale per row.

    ``center`` and ``scale`` standardize features for distance computations.
    """

    rows: np.ndarray
    f_base: np.ndarray
    v_base: np.ndarray
    center: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)

    def __post_init__(self):
        rows = np.ascontiguousarray(np.asarray(self.rows, dtype=float))
        if rows.ndim != 2 or rows.shape[0] == 0 or rows.shape[1] == 0:
            raise IngestionError(f"feature pool must be a nonempty 2-d array, got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise IngestionError("feature pool contains non-finite values")
        n = rows.shape[0]
        f = np.asarray(self.f_base, dtype=float).reshape(-1)
        v = np.asarray(self.v_base, dtype=float).reshape(-1)
        if f.shape != (n,) or v.shape != (n,):
            raise IngestionError("f_base and v_base must have one entry per pool row")
        if np.any(v < 0):
            raise IngestionError("v_base entries must be nonnegative")
        center = rows.mean(axis=0) if self.center is None else np.asarray(self.center, float)
        if self.scale is None:
            scale = rows.std(axis=0)
            scale = np.where(scale > 0, scale, 1.0)
        else:
            scale = np.asarray(self.scale, float)
        for name, val in (("rows", rows), ("f_base", f), ("v_base", v), ("center", center), ("scale", scale)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.center) / self.scale

    def context(self, index: int) -> Context:
        return Context(self.rows[index], int(index))


# closed-form surrogates for the synthetic pool, keyed by name
SURROGATE_MEANS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "default": lambda x: 1.0 + np.sin(x[:, 0]) + 0.25 * x[:, min(1, x.shape[1] - 1)] ** 2,
    "x1": lambda x: x[:, 0].copy(),
    "zero": lambda x: np.zeros(x.shape[0]),
    "one": lambda x: np.ones(x.shape[0]),
}
SURROGATE_VARIANCES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "default": lambda x: np.exp(0.5 * x[:, min(2, x.shape[1] - 1)]),
    "one": lambda x: np.ones(x.shape[0]),
}


def _resolve(fn, registry, label):
    if callable(fn):
        return fn
    try:
        return registry[fn]
    except KeyError:
        raise DomainError(f"unknown {label} surrogate {fn!r}; choose from {sorted(registry)}") from None


def synthetic_pool(n: int = 500, p: int = 5, f="default", v="default", seed: int = 0) -> FeaturePool:
    """Pool of ``n`` standard normal rows in ``p`` dimensions.

    ``f`` and ``v`` are registry names or vectorized callables mapping an
    (n, p) array to n values.
    """
    if n < 1 or p < 1:
        raise IngestionError(f"synthetic pool needs n >= 1 and p >= 1, got n={n}, p={p}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x706F6F6C]))
    rows = rng.standard_normal((n, p))
    f_vals = np.asarray(_resolve(f, SURROGATE_MEANS, "mean")(rows), dtype=float)
    v_vals = np.asarray(_resolve(v, SURROGATE_VARIANCES, "variance")(rows), dtype=float)
    return FeaturePool(rows, f_vals, v_vals)


def _read_csv(path: Path, feature_cols: Sequence[str] | None, outcome_col: str):
    if not path.is_file():
        raise IngestionError(f"feature file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if outcome_col not in header:
            raise IngestionError(f"{path}: outcome column {outcome_col!r} not in header")
        if feature_cols is None:
            feature_cols = [h for h in header if h != outcome_col]
        missing = [c for c in feature_cols if c not in header]
        if missing:
            raise IngestionError(f"{path}: feature columns not in header: {missing}")
        fidx = [header.index(c) for c in feature_cols]
        yidx = header.index(outcome_col)
        xs, ys = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header) or any(not rec[i].strip() for i in fidx + [yidx]):
                raise IngestionError(f"{path}: line {lineno}: missing cell")
            try:
                xs.append([float(rec[i]) for i in fidx])
                ys.append(float(rec[yidx]))
            except ValueError:
                raise IngestionError(f"{path}: line {lineno}: non-numeric cell") from None
    if not xs:
        raise IngestionError(f"{path}: no data rows")
    return np.array(xs), np.array(ys)


def csv_pool(
    path: str | Path,
    outcome_col: str,
    feature_cols: Sequence[str] | None = None,
    k: int = 25,
) -> FeaturePool:
    """Pool from a CSV file with surrogates fitted by nearest-neighbor regression.

    ``f(x)`` is the k-NN average of the outcome and ``v(x)`` the k-NN average of
    the squared residual ``(y - f(x))**2``.
    """
    from .nuisance import knn_regress

    x, y = _read_csv(Path(path), feature_cols, outcome_col)
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    xs = (x - center) / scale
    f_vals = knn_regress(xs, y, xs, k)
    v_vals = knn_regress(xs, (y - f_vals) ** 2, xs, k)
    return FeaturePool(x, f_vals, np.maximum(v_vals, 0.0), center, scale)


def build_feature_pool(spec: Mapping) -> FeaturePool:
    """Dispatch on ``spec["source"]`` (``"synthetic"`` or ``"csv"``)."""
    source = spec.get("source", "synthetic")
    if source == "synthetic":
        return synthetic_pool(
            int(spec.get("n", 500)),
            int(spec.get("p", 5)),
            spec.get("f", "default"),
            spec.get("v", "default"),
            int(spec.get("seed", 0)),
        )
    if source == "csv":
        if "path" not in spec or "outcome" not in spec:
            raise IngestionError("csv pool needs 'path' and 'outcome'")
        return csv_pool(spec["path"], spec["outcome"], spec.get("features"), int(spec.get("k", 25)))
    raise IngestionError(f"unknown pool source {source!r}")


def sample_context(pool: FeaturePool, rng: np.random.Generator) -> Context:
    """Uniform draw with replacement from the pool."""
    if pool.n == 0:
        raise IngestionError("cannot sample from an empty pool")
    return pool.context(int(rng.integers(pool.n)))


def _check_arm(scn: Scenario, arm: int) -> int:
    arm = int(arm)
    if not 0 <= arm < scn.K:
        raise DomainError(f"arm must lie in [0, {scn.K}), got {arm}")
    return arm


def _pool_index(ctx: Context, pool: FeaturePool) -> int:
    if not 0 <= ctx.pool_index < pool.n:
        raise DomainError(f"context has no valid pool index ({ctx.pool_index})")
    return ctx.pool_index


def outcome_mean(scn: Scenario, ctx: Context, arm: int, pool: FeaturePool) -> float:
    arm = _check_arm(scn, arm)
    return float(scn.beta1[arm] + scn.beta2[arm] * pool.f_base[_pool_index(ctx, pool)])


def mean_table(scn: Scenario, pool: FeaturePool) -> np.ndarray:
    """Arm means for every pool row, shape (n, K)."""
    return scn.beta1[None, :] + scn.beta2[None, :] * pool.f_base[:, None]


def sd_table(scn: Scenario, pool: FeaturePool) -> np.ndarray:
    """Outcome noise standard deviations for every pool row, shape (n, K)."""
    if scn.mode == HOMOSKEDASTIC:
        return np.full((pool.n, scn.K), float(scn.base_noise_sd))
    var = scn.gamma[None, :] * pool.v_base[:, None]
    if np.any(var <= 0):
        raise DegenerateNoiseError("gamma * v(x) must be positive for every pool row")
    return np.sqrt(var)


def outcome_sd(scn: Scenario, ctx: Context, arm: int, pool: FeaturePool) -> float:
    arm = _check_arm(scn, arm)
    if scn.mode == HOMOSKEDASTIC:
        return float(scn.base_noise_sd)
    var = scn.gamma[arm] * pool.v_base[_pool_index(ctx, pool)]
    if not var > 0:
        raise DegenerateNoiseError(f"noise variance {var} is not positive")
    return float(np.sqrt(var))


def sample_outcome(scn: Scenario, ctx: Context, arm: int, pool: FeaturePool, rng: np.random.Generator) -> float:
    mu = outcome_mean(scn, ctx, arm, pool)
    return float(mu + outcome_sd(scn, ctx, arm, pool) * rng.standard_normal())


def binarize_outcome(y, threshold: float):
    """1 where ``y > threshold`` (strict), else 0."""
    out = (np.asarray(y, dtype=float) > threshold).astype(float)
    return float(out) if out.ndim == 0 else out


def default_threshold(scn: Scenario, pool: FeaturePool, pe: np.ndarray | None = None) -> float:
    """Population mean outcome over the pool under arm weights ``pe``."""
    if scn.binarize_threshold is not None:
        return float(scn.binarize_threshold)
    w = np.full(scn.K, 1.0 / scn.K) if pe is None else np.asarray(pe, dtype=float)
    return float((mean_table(scn, pool) * w).sum(axis=1).mean())


def assign_split(rng: np.random.Generator, r: float) -> SplitFlag:
    """Bernoulli(r) routing flag; ``rng`` should be a dedicated stream."""
    if not 0.0 < r < 1.0:
        raise DomainError(f"split ratio must lie in (0, 1), got {r}")
    return SplitFlag(int(rng.random() < r))
