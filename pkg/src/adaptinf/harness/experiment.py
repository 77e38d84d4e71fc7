"""Seeded Monte Carlo replications and their aggregation into coverage tables."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..env import FeaturePool
from ..inference import PipelineOptions, marginal_interval, run_pipeline
from ..mathkit import chi2_quantile
from ..mestim import WorkingModel, projection_oracle
from ..nuisance import MAX_GEOMETRY_ROWS, PoolGeometry
from ..simulate import SimulationSettings, Trajectory, replication_rngs, simulate
from .config import ExperimentConfig

logger = logging.getLogger(__name__)


def mc_se(p: float, n: int) -> float:
    """Binomial standard error of a coverage estimate from ``n`` replications."""
    return math.sqrt(p * (1.0 - p) / n)


@dataclass
class ReplicationRow:
    """Outcome of one method at one checkpoint of one replication.

    ``covered`` is None when the method failed; ``contrast_covered`` and
    ``widths`` hold one entry per unit contrast.
    """

    rep: int
    method: str
    checkpoint: int
    covered: bool | None
    theta_hat: tuple
    widths: tuple
    contrast_covered: tuple
    residual: float
    singular: bool
    n_identity_blocks: int
    error: str = ""

    @property
    def flagged(self) -> bool:
        return self.covered is None or self.singular


@dataclass
class CoverageRow:
    method: str
    policy: str
    scenario: str
    checkpoint: int
    alpha: float
    coverage: float
    mc_se: float
    n_reps: int
    flagged: int


@dataclass
class WidthRow:
    method: str
    policy: str
    scenario: str
    checkpoint: int
    contrast_index: int
    mean_width: float
    sd_width: float


@dataclass
class ContrastRow:
    """Pointwise coverage of one unit contrast."""

    method: str
    policy: str
    scenario: str
    checkpoint: int
    contrast_index: int
    coverage: float
    mc_se: float
    n_reps: int


@dataclass
class CoverageTable:
    coverage: list = field(default_factory=list)
    widths: list = field(default_factory=list)
    contrasts: list = field(default_factory=list)

    def lookup(self, method: str, checkpoint: int) -> CoverageRow:
        for r in self.coverage:
            if r.method == method and r.checkpoint == checkpoint:
                return r
        raise KeyError((method, checkpoint))

    def mean_width(self, method: str, checkpoint: int) -> float:
        ws = [r.mean_width for r in self.widths if r.method == method and r.checkpoint == checkpoint]
        return float(np.mean(ws)) if ws else float("nan")


@dataclass
class ExperimentContext:
    """Per-process state shared by every replication of one experiment."""

    cfg: ExperimentConfig
    pool: FeaturePool
    wm: WorkingModel
    theta_star: np.ndarray
    threshold: float | None
    geometry: PoolGeometry | None
    options: PipelineOptions

    @classmethod
    def build(cls, cfg: ExperimentConfig, theta_star=None) -> "ExperimentContext":
        pool = cfg.build_pool()
        wm = cfg.working_model()
        threshold = cfg.threshold(pool)
        if theta_star is None:
            theta_star = cached_theta_star(cfg, pool, wm, threshold)
        geometry = PoolGeometry(pool) if pool.n <= MAX_GEOMETRY_ROWS else None
        opts = PipelineOptions(external_ratio=cfg.external_ratio, z_table=wm.z_table(pool.rows))
        return cls(cfg, pool, wm, np.asarray(theta_star, float), threshold, geometry, opts)

    def settings(self) -> SimulationSettings:
        n = self.cfg.nuisance
        return SimulationSettings(
            T=self.cfg.T, cadence=n.cadence, k=n.k, variance_floor=n.variance_floor, prior_mean=n.prior_mean,
            prior_second=n.prior_second, split_ratio=self.cfg.split_ratio,
            split_training=self.cfg.split_training, external_size=self.cfg.external_size(),
        )


_THETA_CACHE: dict = {}


def cached_theta_star(cfg: ExperimentConfig, pool: FeaturePool, wm: WorkingModel, threshold) -> np.ndarray:
    """Projection parameter, computed once per (scenario, evaluation policy, model, pool)."""
    key = (repr(cfg.scenario.beta1.tolist()), repr(cfg.scenario.beta2.tolist()),
           repr(cfg.scenario.gamma.tolist()), cfg.scenario.mode, cfg.scenario.base_noise_sd,
           tuple(cfg.pe.tolist()), cfg.model_kind, cfg.family, cfg.doses, repr(sorted(cfg.pool.items())),
           threshold)
    if key not in _THETA_CACHE:
        _THETA_CACHE[key] = projection_oracle(wm, cfg.scenario, pool, cfg.pe, threshold)
    return _THETA_CACHE[key].copy()


def simulate_replication(ctx: ExperimentContext, rep: int) -> Trajectory:
    cfg = ctx.cfg
    return simulate(cfg.scenario, ctx.pool, cfg.policy, ctx.settings(), replication_rngs(cfg.seed, rep),
                    ctx.threshold, ctx.geometry)


def run_replication(cfg: ExperimentConfig, rep: int, ctx: ExperimentContext | None = None) -> list[ReplicationRow]:
    """Simulate trajectory ``rep`` and run every configured method on it."""
    ctx = ctx or ExperimentContext.build(cfg)
    traj = simulate_replication(ctx, rep)
    d = ctx.wm.d
    unit = np.eye(d)
    rad1 = chi2_quantile(1, 1.0 - cfg.alpha)
    rows = []
    for method in cfg.methods:
        for res in run_pipeline(method, traj, ctx.wm, cfg.pe, cfg.alpha, cfg.checkpoints, ctx.options):
            if not res.ok:
                rows.append(ReplicationRow(rep, method, res.checkpoint, None, (math.nan,) * d, (math.nan,) * d,
                                           (None,) * d, math.nan, False, res.n_identity_blocks, res.error))
                continue
            r = res.region
            widths, cov_c = [], []
            for j in range(d):
                if r.singular:
                    widths.append(math.inf)
                    cov_c.append(None)
                    continue
                lo, hi = marginal_interval(r, unit[j], rad1)
                widths.append(hi - lo)
                cov_c.append(bool(lo <= ctx.theta_star[j] <= hi))
            rows.append(ReplicationRow(rep, method, res.checkpoint, r.contains(ctx.theta_star),
                                       tuple(float(x) for x in res.theta_hat), tuple(widths), tuple(cov_c),
                                       float(res.residual), r.singular, res.n_identity_blocks))
    return rows


_WORKER_CTX: ExperimentContext | None = None


def _init_worker(cfg, theta_star):
    global _WORKER_CTX
    _WORKER_CTX = ExperimentContext.build(cfg, theta_star)


def _run_in_worker(rep):
    return run_replication(_WORKER_CTX.cfg, rep, _WORKER_CTX)


def run_replications(cfg: ExperimentConfig, reps=None, workers: int | None = None) -> list[ReplicationRow]:
    """Rows for the given replication indices (default ``range(cfg.reps)``), in index order."""
    reps = list(range(cfg.reps)) if reps is None else list(reps)
    workers = cfg.workers if workers is None else workers
    ctx = ExperimentContext.build(cfg)
    out: list[ReplicationRow] = []
    if workers <= 1 or len(reps) <= 1:
        for r in reps:
            out.extend(run_replication(cfg, r, ctx))
        return out
    chunk = max(1, len(reps) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=(cfg, ctx.theta_star)) as pool:
        for rows in pool.map(_run_in_worker, reps, chunksize=chunk):
            out.extend(rows)
    return out


def _policy_label(cfg: ExperimentConfig) -> str:
    return cfg.policy.variant


def aggregate(cfg: ExperimentConfig, rows: list[ReplicationRow]) -> CoverageTable:
    """Coverage and width summaries per (method, checkpoint); flagged rows are skipped."""
    table = CoverageTable()
    policy, scenario = _policy_label(cfg), cfg.scenario.name
    # fixed summation order makes the table independent of row arrival order
    rows = sorted(rows, key=lambda r: r.rep)
    for method in cfg.methods:
        for cp in cfg.checkpoints:
            sel = [r for r in rows if r.method == method and r.checkpoint == cp]
            good = [r for r in sel if not r.flagged]
            n = len(good)
            if n:
                p = float(np.mean([r.covered for r in good]))
                se = mc_se(p, n)
            else:
                p = se = math.nan
            skipped = len(sel) - n
            if skipped:
                logger.warning("%s at T=%d: skipped %d flagged replication(s)", method, cp, skipped)
            table.coverage.append(CoverageRow(method, policy, scenario, cp, cfg.alpha, p, se, n, skipped))
            d = len(good[0].widths) if good else len(sel[0].widths) if sel else 0
            for j in range(d):
                w = np.array([r.widths[j] for r in good])
                table.widths.append(WidthRow(
                    method, policy, scenario, cp, j,
                    float(w.mean()) if n else math.nan,
                    float(w.std(ddof=1)) if n > 1 else math.nan,
                ))
                pc = float(np.mean([r.contrast_covered[j] for r in good])) if n else math.nan
                table.contrasts.append(ContrastRow(method, policy, scenario, cp, j, pc,
                                                   mc_se(pc, n) if n else math.nan, n))
    return table


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> CoverageTable:
    """Run all replications, aggregate, and write the CSV outputs when ``out_dir`` is given."""
    from .io import write_results

    rows = run_replications(cfg, workers=workers)
    table = aggregate(cfg, rows)
    if out_dir is not None:
        write_results(table, rows, out_dir)
    return table
