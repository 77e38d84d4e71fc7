import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptinf import env, mestim, varest
from adaptinf.errors import DomainError
from adaptinf.inference import _pool_vhats, PipelineOptions
from adaptinf.mathkit import op_norm, sym_inv_sqrt
from adaptinf.policies import Policy, PolicyKind, apply_floor
from adaptinf.simulate import SimulationSettings, replication_rngs, simulate

from conftest import random_pd


class _Fixed:
    """Stand-in snapshot returning fixed prediction tables for pool rows."""

    def __init__(self, F, E):
        self.F, self.E = np.asarray(F, float), np.asarray(E, float)

    def predict_contexts(self, contexts):
        idx = [max(c.pool_index, 0) for c in contexts]
        return self.F[idx], self.E[idx]


def _one_row_pool():
    return env.FeaturePool(np.zeros((1, 1)), [0.0], [1.0])


@pytest.fixture(scope="module")
def hetero():
    pool = env.synthetic_pool(150, 3, seed=11)
    scn = env.builtin_scenario(2, 3)
    return pool, scn, varest.TrueNuisance(scn, pool)


class TestGH:
    def test_calibrated_model_gives_zero_g(self, rng):
        wm = mestim.onehot_features_model(2, 1)
        theta = rng.standard_normal(wm.d)
        Z = wm.z_table(rng.standard_normal((5, 1)))
        G, _ = varest.gh_tables(wm, theta, Z, Z @ theta, (Z @ theta) ** 2 + 1)
        np.testing.assert_allclose(G, 0.0, atol=1e-14)

    def test_onehot_sparsity(self, hetero):
        pool, scn, truth = hetero
        gh = varest.GHPredictors(np.zeros(3), truth, mestim.onehot_model(3))
        g = varest.glm_g(gh, pool.context(4), 1)
        assert g[0] == 0 and g[2] == 0 and g[1] != 0

    def test_against_monte_carlo(self, hetero, rng):
        pool, scn, truth = hetero
        wm = mestim.onehot_features_model(3, 3)
        gh = varest.GHPredictors(0.3 * rng.standard_normal(wm.d), truth, wm)
        ctx = pool.context(17)
        n = 100_000
        for arm in range(3):
            y = env.outcome_mean(scn, ctx, arm, pool) + env.outcome_sd(scn, ctx, arm, pool) * rng.standard_normal(n)
            z = wm.z(ctx, arm)
            md = wm.c * (y - wm.psi(z @ gh.theta_bar))[:, None] * z
            se = md.std(axis=0) / np.sqrt(n)
            assert np.all(np.abs(md.mean(axis=0) - varest.glm_g(gh, ctx, arm)) <= 3 * se + 1e-12)
            outer = md[:, :, None] * md[:, None, :]
            se2 = outer.std(axis=0) / np.sqrt(n)
            assert np.all(np.abs(outer.mean(axis=0) - varest.glm_h(gh, ctx, arm)) <= 3 * se2 + 1e-12)

    def test_nu_hat_hand(self):
        # theta = 0 and f = 0.5 give g(., a) = 2 * 0.5 * e_a = e_a
        wm = mestim.onehot_model(2)
        gh = varest.GHPredictors(np.zeros(2), _Fixed([[0.5, 0.5]], [[1.0, 1.0]]), wm)
        ctx = _one_row_pool().context(0)
        np.testing.assert_allclose(varest.glm_g(gh, ctx, 0), [1.0, 0.0])
        np.testing.assert_allclose(varest.nu_hat(gh, [0.5, 0.5], ctx), [0.5, 0.5])

    def test_nu_hat_zero(self):
        wm = mestim.onehot_model(2)
        gh = varest.GHPredictors(np.array([0.2, 0.4]), _Fixed([[0.2, 0.4]], [[1.0, 1.0]]), wm)
        np.testing.assert_allclose(varest.nu_hat(gh, [0.3, 0.7], _one_row_pool().context(0)), 0.0)

    def test_nu_hat_monte_carlo(self, hetero, rng):
        pool, scn, truth = hetero
        wm = mestim.onehot_model(3)
        pe = np.array([0.2, 0.5, 0.3])
        gh = varest.GHPredictors(np.array([0.5, 1.0, 2.0]), truth, wm)
        ctx = pool.context(3)
        n = 100_000
        arm = rng.choice(3, size=n, p=pe)
        mu = env.mean_table(scn, pool)[3, arm]
        y = mu + env.sd_table(scn, pool)[3, arm] * rng.standard_normal(n)
        md = wm.c * (y - gh.theta_bar[arm])[:, None] * np.eye(3)[arm]
        se = md.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(md.mean(axis=0) - varest.nu_hat(gh, pe, ctx)) <= 3 * se)


class TestVhatPool:
    def test_identity_example(self):
        G = np.zeros((1, 2, 2))
        H = np.broadcast_to(np.eye(2), (1, 2, 2, 2))
        V = varest.vhat_from_tables(np.array([0.5, 0.5]), G, H, np.array([[0.5, 0.5]]))
        np.testing.assert_allclose(V, np.eye(2))
        # the same through vhat_pool: theta = 0, f = 0, e = 0.5 gives h = 4 * 0.5 * e_a e_a'
        wm = mestim.onehot_model(2)
        gh = varest.GHPredictors(np.zeros(2), _Fixed([[0.0, 0.0]], [[0.5, 0.5]]), wm)
        ctx = _one_row_pool().context(0)
        V2 = varest.vhat_pool(gh, [0.5, 0.5], [ctx], lambda c: np.array([0.5, 0.5]))
        np.testing.assert_allclose(V2, np.eye(2))

    def test_single_point(self, hetero, rng):
        pool, scn, truth = hetero
        wm = mestim.onehot_model(3)
        theta = rng.standard_normal(3)
        gh = varest.GHPredictors(theta, _Fixed(truth.F[:1], truth.E[:1]), wm)
        ctx = env.Context(pool.rows[0], 0)
        P = np.array([0.2, 0.3, 0.5])
        pe = np.array([0.5, 0.25, 0.25])
        V = varest.vhat_pool(gh, pe, [ctx], lambda c: P)
        G, H = gh.tables([ctx])
        expected = sum(pe[a] ** 2 / P[a] * (H[0, a] - np.outer(G[0, a], G[0, a])) for a in range(3))
        np.testing.assert_allclose(V, expected, atol=1e-12)

    def test_empty_pool(self, hetero):
        gh = varest.GHPredictors(np.zeros(3), hetero[2], mestim.onehot_model(3))
        with pytest.raises(DomainError):
            varest.vhat_pool(gh, np.full(3, 1 / 3), [], lambda c: np.full(3, 1 / 3))

    def test_matches_monte_carlo(self, hetero):
        pool, scn, truth = hetero
        wm = mestim.onehot_features_model(3, 3)
        pe = np.array([0.2, 0.5, 0.3])
        theta = mestim.projection_oracle(wm, scn, pool, pe)
        gh = varest.GHPredictors(theta, truth, wm)
        ctxs = [pool.context(i) for i in range(pool.n)]
        V = varest.vhat_pool(gh, pe, ctxs, lambda c: pe)
        mc = varest.mc_score_variance(wm, theta, np.tile(pe, (pool.n, 1)), pe, scn, pool, truth, 100_000,
                                      np.random.default_rng(5))
        assert op_norm(V - mc) / op_norm(mc) <= 0.1


class TestVhatNaive:
    def test_single(self):
        np.testing.assert_array_equal(varest.vhat_naive([[-2.0, 0.0]]), [[4.0, 0.0], [0.0, 0.0]])

    def test_zero(self):
        np.testing.assert_array_equal(varest.vhat_naive(np.zeros((5, 3))), np.zeros((3, 3)))

    def test_law_of_large_numbers(self, rng):
        C = random_pd(rng, 3)
        S = rng.multivariate_normal(np.zeros(3), C, size=10_000)
        assert op_norm(varest.vhat_naive(S) - C) <= 0.1 * op_norm(C)

    def test_empty(self):
        with pytest.raises(DomainError):
            varest.vhat_naive(np.zeros((0, 2)))


class TestMonteCarlo:
    def test_deterministic_outcome(self):
        pool = env.synthetic_pool(50, 2, seed=1)
        scn = env.Scenario(2, [1.0, -1.0], [0.0, 0.0], base_noise_sd=1e-9)
        wm = mestim.onehot_model(2)
        truth = varest.TrueNuisance(scn, pool)
        P = np.tile([0.3, 0.7], (pool.n, 1))
        V = varest.mc_score_variance(wm, np.zeros(2), P, [0.5, 0.5], scn, pool, truth, 5000,
                                     np.random.default_rng(0))
        assert op_norm(V) <= 1e-12

    def test_too_few_draws(self, hetero):
        pool, scn, truth = hetero
        with pytest.raises(DomainError):
            varest.mc_score_variance(mestim.onehot_model(3), np.zeros(3), np.full((pool.n, 3), 1 / 3),
                                     np.full(3, 1 / 3), scn, pool, truth, 999, np.random.default_rng(0))

    def test_root_n_rate(self, hetero):
        pool, scn, truth = hetero
        wm = mestim.onehot_model(3)
        pe = np.full(3, 1 / 3)
        theta = mestim.projection_oracle(wm, scn, pool, pe)
        P = np.tile(pe, (pool.n, 1))
        G, H = varest.gh_tables(wm, theta, wm.z_table(pool.rows), truth.F, truth.E)
        exact = varest.vhat_from_tables(pe, G, H, P)
        spread = []
        for n_mc in (1000, 4000, 16000):
            errs = [op_norm(varest.mc_score_variance(wm, theta, P, pe, scn, pool, truth, n_mc,
                                                     np.random.default_rng(s)) - exact) for s in range(60)]
            spread.append(np.sqrt(np.mean(np.square(errs))))
        ratios = np.array(spread[:-1]) / np.array(spread[1:])
        np.testing.assert_allclose(ratios, 2.0, rtol=0.3)


def _finite_instance(rng, n=20, K=2, V=3):
    wm = mestim.onehot_features_model(K, 1)
    Z = wm.z_table(rng.standard_normal((n, 1)))
    values = rng.standard_normal((n, K, V))
    probs = rng.dirichlet(np.ones(V), size=(n, K))
    mu = (values * probs).sum(axis=2)
    second = (values ** 2 * probs).sum(axis=2)
    P = apply_floor(rng.dirichlet(np.ones(K), size=n), 0.05)
    pe = rng.dirichlet(np.ones(K))
    return wm, Z, values, probs, mu, second, P, pe


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_total_variance_decomposition(seed):
    rng = np.random.default_rng(seed)
    wm, Z, values, probs, mu, second, P, pe = _finite_instance(rng)
    theta = rng.standard_normal(wm.d)
    exact = varest.enumerate_score_variance(wm, theta, pe, Z, mu, P, values, probs)
    G, H = varest.gh_tables(wm, theta, Z, mu, second)
    np.testing.assert_allclose(varest.vhat_from_tables(pe, G, H, P), exact, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_emitted_matrices_symmetric(seed):
    rng = np.random.default_rng(seed)
    wm, Z, values, probs, mu, second, P, pe = _finite_instance(rng)
    G, H = varest.gh_tables(wm, rng.standard_normal(wm.d), Z, mu, second)
    V = varest.vhat_from_tables(pe, G, H, P, rng.integers(1, 4, size=Z.shape[0]))
    np.testing.assert_allclose(V, V.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(sym_inv_sqrt(V)) > 0)


class TestSequence:
    def test_block_lookup(self):
        seq = varest.VHatSequence.from_matrices([1, 101, 201], np.stack([np.eye(2) * s for s in (1, 4, 9)]))
        np.testing.assert_array_equal(seq.block_of([1, 100, 101, 250]), [0, 0, 1, 2])
        np.testing.assert_allclose(seq.inv_sqrt[1], 0.5 * np.eye(2))

    def test_inactive_blocks_get_zero_weight(self):
        seq = varest.VHatSequence.from_matrices([1, 101], np.stack([np.eye(2)] * 2), active=[False, True])
        np.testing.assert_array_equal(seq.inv_sqrt[0], 0.0)

    def test_invalid(self):
        with pytest.raises(DomainError):
            varest.VHatSequence.from_matrices([1, 1], np.stack([np.eye(2)] * 2))
        with pytest.raises(DomainError):
            varest.VHatSequence.from_matrices([1], np.eye(2)[None], active=[False])


@pytest.fixture(scope="module")
def split_traj():
    pool = env.synthetic_pool(120, 2, seed=4)
    st_ = SimulationSettings(T=600, split_training=True, external_size=600)
    traj = simulate(env.builtin_scenario(1, 3), pool, PolicyKind("epsilon_greedy"), st_, replication_rngs(1, 0))
    return traj


def _vhats(method, traj, T_c=600):
    wm = mestim.onehot_model(3)
    pe = np.full(3, 1 / 3)
    blocks = np.arange(traj.block_P.shape[0])
    return _pool_vhats(method, traj, wm, pe, np.array([0.1, 0.5, 1.0]), blocks, T_c, PipelineOptions(),
                       wm.z_table(traj.pool.rows))[0]


def test_splitting_ignores_feature_half_outcomes(split_traj):
    base = _vhats("maipwm_splitting", split_traj)
    other = copy.copy(split_traj)
    other.y = split_traj.y.copy()
    other.y[split_traj.split == 1] = 1e6
    np.testing.assert_array_equal(_vhats("maipwm_splitting", other), base)


def test_splitting_training_half_permutation(split_traj):
    # outcomes of the training half swapped between rounds with the same row and arm
    traj = split_traj
    snaps = traj.snapshots()
    y = traj.y.copy()
    train = np.flatnonzero(traj.split == 0)
    key = traj.pool_index[train] * 10 + traj.arm[train]
    block = traj.block[train]
    for k in np.unique(key):
        for b in np.unique(block):
            sel = train[(key == k) & (block == b)]
            if sel.size > 1:
                y[sel] = y[sel][::-1]
    assert not np.array_equal(y, traj.y)
    perm = copy.copy(traj)
    perm.y = y
    snaps2 = perm.snapshots()
    X = traj.pool.rows
    for b in snaps:
        for a, c in zip(snaps[b].predict_features(X), snaps2[b].predict_features(X)):
            np.testing.assert_allclose(a, c, atol=1e-12)


@pytest.mark.parametrize("method", ["maipwm_reuse", "maipwm_splitting"])
def test_block_measurability(split_traj, method):
    base = _vhats(method, split_traj)
    b = 3
    start = split_traj.block_starts()[b]
    other = copy.copy(split_traj)
    other.pool_index = split_traj.pool_index.copy()
    other.pool_index[start - 1:] = 0
    other.y = split_traj.y.copy()
    other.y[start - 1:] = -50.0
    changed = _vhats(method, other)
    np.testing.assert_array_equal(changed[: b + 1], base[: b + 1])
    assert not np.array_equal(changed[b + 1:], base[b + 1:])
