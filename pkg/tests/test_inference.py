import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptinf import env, inference, mestim
from adaptinf.errors import DomainError
from adaptinf.mathkit import chi2_quantile, normal_quantile
from adaptinf.policies import PolicyKind
from adaptinf.simulate import SimulationSettings, replication_rngs, simulate
from adaptinf.varest import VHatSequence

from conftest import random_pd


def _region(center, shape, radius=1.642, alpha=0.2):
    return inference.ConfidenceRegion(np.asarray(center, float), np.asarray(shape, float), radius, alpha)


class TestRegionGeometry:
    def test_hand_interval(self):
        lo, hi = inference.marginal_interval(_region([0.0], [[2.0]]), [1.0])
        assert hi == pytest.approx(0.6407, abs=5e-5)
        assert lo == pytest.approx(-0.6407, abs=5e-5)

    def test_zero_contrast(self, rng):
        r = _region([1.0, 2.0], random_pd(rng, 2))
        assert inference.marginal_interval(r, [0.0, 0.0]) == (0.0, 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 10))
    def test_width_homogeneity(self, seed, c):
        rng = np.random.default_rng(seed)
        B = random_pd(rng, 3)
        eta = rng.standard_normal(3)
        lo, hi = inference.marginal_interval(_region(np.zeros(3), B), eta)
        lo2, hi2 = inference.marginal_interval(_region(np.zeros(3), c * B), eta)
        assert hi2 - lo2 == pytest.approx((hi - lo) / c, rel=1e-9)

    def test_contains(self):
        r = _region([0.0, 0.0], np.eye(2), radius=4.0)
        assert r.contains([0.0, 0.0])
        assert r.contains([2.0, 0.0])  # squared distance equals the radius
        assert not r.contains([math.sqrt(8.0), 0.0])
        with pytest.raises(DomainError):
            r.contains([0.0, 0.0, 0.0])

    def test_nesting(self, rng):
        B = random_pd(rng, 3)
        r20 = inference.make_region(np.zeros(3), B, 0.2)
        r05 = inference.make_region(np.zeros(3), B, 0.05)
        assert r20.radius == chi2_quantile(3, 0.8) < r05.radius
        pts = rng.standard_normal((2000, 3)) * 2
        for p in pts:
            assert (not r20.contains(p)) or r05.contains(p)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_supporting_hyperplane(self, seed):
        rng = np.random.default_rng(seed)
        B = random_pd(rng, 3) + rng.standard_normal((3, 3)) * 0.1
        r = inference.make_region(rng.standard_normal(3), B, 0.2)
        eta = rng.standard_normal(3)
        lo, hi = inference.marginal_interval(r, eta)
        direction = np.linalg.solve(B.T @ B, eta)
        half = hi - eta @ r.center
        # the point of the ellipsoid extreme along eta sits exactly at the interval end
        tip = r.center + direction * half / (eta @ direction)
        assert eta @ tip == pytest.approx(hi, rel=1e-9, abs=1e-9)
        v = B @ (r.center - tip)
        assert v @ v == pytest.approx(r.radius, rel=1e-8)
        assert not r.contains(r.center + direction * 1.001 * half / (eta @ direction))

    def test_singular_shape(self):
        r = inference.make_region(np.zeros(2), np.array([[1.0, 0.0], [0.0, 0.0]]), 0.2)
        assert r.singular
        with pytest.raises(DomainError):
            inference.marginal_interval(r, [1.0, 0.0])

    def test_bad_alpha(self):
        with pytest.raises(DomainError):
            inference.make_region(np.zeros(1), np.eye(1), 1.0)


@pytest.fixture(scope="module")
def uniform_traj():
    pool = env.synthetic_pool(300, 3, seed=2)
    scn = env.builtin_scenario(1, 4)
    st_ = SimulationSettings(T=2000, external_size=2000)
    return scn, pool, simulate(scn, pool, PolicyKind("uniform"), st_, replication_rngs(3, 0))


class TestEstimator:
    def test_identity_weights_recover_tilde(self, uniform_traj):
        scn, pool, traj = uniform_traj
        wm = mestim.onehot_model(4)
        pe = np.full(4, 0.25)
        hist, snaps = traj.history(), traj.snapshots()
        tilde = mestim.solve_tilde_theta(wm, hist, snaps, pe)
        hat = inference.solve_hat_theta(wm, hist, snaps, pe, VHatSequence.constant(np.eye(4)))
        np.testing.assert_allclose(hat, tilde, atol=1e-9)

    def test_constant_weights_recover_tilde(self, uniform_traj, rng):
        scn, pool, traj = uniform_traj
        wm = mestim.onehot_features_model(4, 3)
        pe = np.full(4, 0.25)
        hist, snaps = traj.history(), traj.snapshots()
        tilde = mestim.solve_tilde_theta(wm, hist, snaps, pe)
        hat = inference.solve_hat_theta(wm, hist, snaps, pe, VHatSequence.constant(random_pd(rng, wm.d)))
        np.testing.assert_allclose(hat, tilde, atol=1e-8)

    def test_region_contains_center(self, uniform_traj):
        scn, pool, traj = uniform_traj
        wm = mestim.onehot_model(4)
        hist, snaps = traj.history(), traj.snapshots()
        vh = VHatSequence.constant(np.eye(4) * 3)
        th = inference.solve_hat_theta(wm, hist, snaps, np.full(4, 0.25), vh)
        r = inference.build_region(wm, hist, snaps, np.full(4, 0.25), vh, th, 0.2)
        assert r.contains(th) and not r.singular

    def test_history_path_matches_pipeline(self, uniform_traj):
        # the generic History-based solver and the table-based pipeline agree
        scn, pool, traj = uniform_traj
        wm = mestim.onehot_model(4)
        pe = np.full(4, 0.25)
        res = inference.run_checkpoint("maipwm_naive", traj, wm, pe, 0.2, traj.T)
        tilde = mestim.solve_tilde_theta(wm, traj.history(), traj.snapshots(), pe)
        np.testing.assert_allclose(res.theta_tilde, tilde, atol=1e-9)

    @pytest.mark.parametrize("method", inference.METHODS)
    def test_residual_contract(self, uniform_traj, method):
        scn, pool, traj = uniform_traj
        wm = mestim.onehot_model(4)
        for res in inference.run_pipeline(method, traj, wm, np.full(4, 0.25), 0.2, [500, 1000, 2000]):
            assert res.ok, res.error
            assert res.residual <= 1e-6

    def test_pipeline_errors(self, uniform_traj):
        scn, pool, traj = uniform_traj
        wm = mestim.onehot_model(4)
        with pytest.raises(DomainError):
            inference.run_pipeline("maipwm_external", traj, wm, np.full(4, 0.25), 0.2, [3000])
        with pytest.raises(DomainError):
            inference.run_checkpoint("bootstrap", traj, wm, np.full(4, 0.25), 0.2, 100)


def test_width_matches_classical_formula():
    # scenario 4 means do not depend on x, so the only variance is the unit noise
    pool = env.synthetic_pool(300, 3, seed=5)
    scn = env.builtin_scenario(4)
    K, T = scn.K, 4000
    wm = mestim.onehot_model(K)
    pe = np.full(K, 1 / K)
    expected = 2 * normal_quantile(0.9) * 1.0 / math.sqrt(T * pe[0])
    rad = chi2_quantile(1, 0.8)
    widths = []
    for rep in range(10):
        traj = simulate(scn, pool, PolicyKind("uniform"), SimulationSettings(T=T, external_size=T),
                        replication_rngs(9, rep))
        for method in ("maipwm_external", "maipwm_reuse", "ipw"):
            r = inference.run_checkpoint(method, traj, wm, pe, 0.2, T).region
            widths += [np.subtract(*inference.marginal_interval(r, np.eye(K)[a], rad)[::-1]) for a in range(K)]
    assert np.mean(widths) == pytest.approx(expected, rel=0.15)


@pytest.mark.slow
def test_standardized_statistic_normality():
    pool = env.synthetic_pool(300, 3, seed=6)
    scn = env.builtin_scenario(1, 4)
    wm = mestim.onehot_model(4)
    pe = np.full(4, 0.25)
    theta_star = mestim.projection_oracle(wm, scn, pool, pe)
    T = 5000
    stats = []
    for rep in range(500):
        traj = simulate(scn, pool, PolicyKind("uniform"), SimulationSettings(T=T, external_size=T),
                        replication_rngs(21, rep))
        r = inference.run_checkpoint("maipwm_external", traj, wm, pe, 0.2, T).region
        stats.append(r.shape @ (r.center - theta_star))
    stats = np.array(stats)
    assert np.all(np.abs(stats.mean(axis=0)) <= 0.15)
    var = stats.var(axis=0, ddof=1)
    assert np.all((var >= 0.8) & (var <= 1.25)), var
