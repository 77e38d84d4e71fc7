"""Fast invariant checks runnable from the command line."""

from __future__ import annotations

import numpy as np
from scipy import integrate

from .._kernels import _fallback
from ..mathkit import chi2_cdf, chi2_quantile, normal_quantile, sym_inv_sqrt
from ..mestim import onehot_model
from ..varest import enumerate_score_variance, gh_tables, vhat_from_tables


def _check_backends(rng):
    try:
        from .._kernels import _core
    except ImportError:
        return True, "compiled backend unavailable; fallback only"

    train = rng.standard_normal((200, 3))
    y = rng.standard_normal(200)
    q = rng.standard_normal((50, 3))
    a = _core.knn_brute_predict(train, y, q, 7)
    b = _fallback.knn_brute_predict(train, y, q, 7)
    err = max(float(np.max(np.abs(x - z))) for x, z in zip(a, b))
    return err < 1e-10, f"max kNN difference {err:.2e}"


def _check_quantiles(rng):
    errs = []
    for dof in (1, 2, 5):
        for p in (0.05, 0.5, 0.8, 0.95):
            q = chi2_quantile(dof, p)
            errs.append(abs(chi2_cdf(dof, q) - p))
    z = normal_quantile(0.9)
    tail, _ = integrate.quad(lambda x: np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi), z, np.inf)
    errs.append(abs(tail - 0.1))
    err = max(errs)
    return err < 1e-8, f"max quantile error {err:.2e}"


def _check_inv_sqrt(rng):
    worst = 0.0
    for _ in range(20):
        a = rng.standard_normal((4, 4))
        m = a @ a.T + 0.1 * np.eye(4)
        w = sym_inv_sqrt(m)
        worst = max(worst, float(np.max(np.abs(w @ m @ w - np.eye(4)))))
    return worst < 1e-8, f"max reconstruction error {worst:.2e}"


def _check_decomposition(rng):
    wm = onehot_model(2)
    n, K = 20, 2
    Z = wm.z_table(rng.standard_normal((n, 2)))
    vals = rng.standard_normal((n, K, 3))
    pr = rng.dirichlet(np.ones(3), size=(n, K))
    mu = (vals * pr).sum(axis=2)
    sec = (vals ** 2 * pr).sum(axis=2)
    p = rng.uniform(0.1, 0.9, n)
    P = np.c_[p, 1.0 - p]
    pe = np.array([0.4, 0.6])
    theta = rng.standard_normal(2)
    exact = enumerate_score_variance(wm, theta, pe, Z, mu, P, vals, pr)
    G, H = gh_tables(wm, theta, Z, mu, sec)
    err = float(np.max(np.abs(exact - vhat_from_tables(pe, G, H, P))))
    return err < 1e-10, f"decomposition error {err:.2e}"


CHECKS = {
    "kernel backends agree": _check_backends,
    "quantile round trips": _check_quantiles,
    "inverse square root": _check_inv_sqrt,
    "variance decomposition": _check_decomposition,
}


def run_selfcheck(seed: int = 0):
    """Run every check; returns a list of ``(name, passed, detail)``."""
    rng = np.random.default_rng(seed)
    return [(name, *fn(rng)) for name, fn in CHECKS.items()]
