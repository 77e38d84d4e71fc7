"""Command-line entry point: ``adaptinf {run,coverage,oracle,selfcheck}``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .errors import AdaptInfError


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("config", help="YAML experiment file")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--reps", type=int, help="override the replication count")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--out", help="output directory")


def _load(args):
    from .harness.config import load_config

    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, reps=args.reps, workers=args.workers, out=args.out)


def _print_table(table):
    print(f"{'method':<18}{'T':>7}{'coverage':>10}{'mc_se':>8}{'n':>6}{'flagged':>9}")
    for r in table.coverage:
        print(f"{r.method:<18}{r.checkpoint:>7}{r.coverage:>10.3f}{r.mc_se:>8.3f}{r.n_reps:>6}{r.flagged:>9}")


def cmd_run(args) -> int:
    from .harness.experiment import run_experiment

    cfg = _load(args)
    table = run_experiment(cfg, cfg.out)
    _print_table(table)
    print(f"results written to {cfg.out}")
    return 0


def cmd_coverage(args) -> int:
    from .harness.experiment import aggregate
    from .harness.io import read_replications, write_table

    cfg = _load(args)
    rows = read_replications(cfg.out)
    table = aggregate(cfg, rows)
    write_table(table, cfg.out)
    _print_table(table)
    return 0


def cmd_oracle(args) -> int:
    from .harness.experiment import ExperimentContext
    from .policies import Policy
    from .simulate import replication_rngs
    from .varest import TrueNuisance, gh_tables, mc_score_variance, vhat_from_tables

    cfg = _load(args)
    ctx = ExperimentContext.build(cfg)
    truth = TrueNuisance(cfg.scenario, ctx.pool, ctx.threshold)
    rngs = replication_rngs(cfg.seed, 0)
    P = Policy(cfg.policy, cfg.K, rng=rngs["thompson"]).probs(truth.F, truth.E)
    mc = mc_score_variance(ctx.wm, ctx.theta_star, P, cfg.pe, cfg.scenario, ctx.pool, truth, args.n_mc,
                           rngs["outcome"], ctx.threshold)
    G, H = gh_tables(ctx.wm, ctx.theta_star, ctx.options.z_table, truth.F, truth.E)
    plug = vhat_from_tables(cfg.pe, G, H, P)
    np.set_printoptions(precision=6, suppress=True)
    print("theta_star:", ctx.theta_star)
    print(f"score covariance, Monte Carlo over {args.n_mc} draws (policy frozen at true nuisances):")
    print(mc)
    print("score covariance, pool plug-in with true nuisances:")
    print(plug)
    return 0


def cmd_selfcheck(args) -> int:
    from .harness.selfcheck import run_selfcheck

    results = run_selfcheck(args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptinf", description="Coverage experiments for adaptive M-estimation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="simulate, estimate, and write all CSV outputs")
    _add_common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("coverage", help="re-aggregate replications.csv from a previous run")
    _add_common(p)
    p.set_defaults(func=cmd_coverage)
    p = sub.add_parser("oracle", help="print the projection parameter and score covariance oracles")
    _add_common(p)
    p.add_argument("--n-mc", type=int, default=100_000, help="Monte Carlo draws for the covariance")
    p.set_defaults(func=cmd_oracle)
    p = sub.add_parser("selfcheck", help="run the built-in invariant checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (AdaptInfError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
