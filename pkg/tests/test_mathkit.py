import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptinf.errors import DomainError, InvalidMatrixError
from adaptinf.mathkit import (
    chi2_cdf,
    chi2_quantile,
    normal_cdf,
    normal_quantile,
    op_norm,
    sym_inv_sqrt,
)

from conftest import random_pd
from oracles import chi2_quantile_quad, normal_quantile_quad


class TestSymInvSqrt:
    def test_identity(self):
        np.testing.assert_allclose(sym_inv_sqrt(np.eye(3), 1e-8), np.eye(3), atol=1e-14)

    def test_diagonal(self):
        np.testing.assert_allclose(sym_inv_sqrt(np.diag([4.0, 9.0]), 1e-8), np.diag([0.5, 1 / 3]), atol=1e-14)

    def test_random_pd_reconstruction(self, rng):
        a = random_pd(rng, 4)
        w = sym_inv_sqrt(a)
        assert op_norm(w @ a @ w - np.eye(4)) <= 1e-8

    def test_floor_caps_eigenvalues(self):
        w = sym_inv_sqrt(np.diag([0.0, -3.0, 4.0]), floor=1e-4)
        np.testing.assert_allclose(np.diag(w), [100.0, 100.0, 0.5])

    def test_rejects_asymmetric(self):
        with pytest.raises(InvalidMatrixError):
            sym_inv_sqrt(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidMatrixError):
            sym_inv_sqrt(np.array([[1.0, np.nan], [np.nan, 1.0]]))

    def test_rejects_bad_floor(self):
        with pytest.raises(DomainError):
            sym_inv_sqrt(np.eye(2), floor=0.0)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (4, 4), elements=st.floats(-10, 10)), st.sampled_from([1e-6, 1e-3, 1.0]))
    def test_eigenvalues_in_range(self, a, floor):
        m = a + a.T
        w = sym_inv_sqrt(m, floor)
        np.testing.assert_allclose(w, w.T, atol=1e-12)
        lam = np.linalg.eigvalsh(w)
        assert np.all(lam > 0)
        assert np.all(lam <= 1 / np.sqrt(floor) * (1 + 1e-9))


class TestQuantiles:
    @pytest.mark.parametrize("dof,p,expected", [(1, 0.95, 3.84146), (2, 0.80, 3.21888)])
    def test_chi2_values(self, dof, p, expected):
        # expected values frozen from chi2_quantile_quad
        assert chi2_quantile_quad(p, dof) == pytest.approx(expected, abs=1e-5)
        assert chi2_quantile(dof, p) == pytest.approx(expected, abs=1e-5)

    def test_chi2_zero(self):
        assert chi2_quantile(3, 0.0) == 0.0

    def test_chi2_domain(self):
        with pytest.raises(DomainError):
            chi2_quantile(2, 1.0)
        with pytest.raises(DomainError):
            chi2_quantile(0, 0.5)

    def test_chi2_cdf_round_trip(self):
        for dof in (1, 3, 8):
            for p in (0.1, 0.5, 0.9, 0.999):
                assert chi2_cdf(dof, chi2_quantile(dof, p)) == pytest.approx(p, abs=1e-10)

    @pytest.mark.parametrize("dof", [1, 2, 4, 9])
    def test_chi2_monotone(self, dof):
        q = [chi2_quantile(dof, p) for p in np.linspace(0.0, 0.999, 80)]
        assert np.all(np.diff(q) > 0)

    def test_normal_values(self):
        assert normal_quantile(0.5) == 0.0
        assert normal_quantile_quad(0.975) == pytest.approx(1.95996, abs=1e-5)
        assert normal_quantile(0.975) == pytest.approx(1.95996, abs=1e-5)

    # below 1e-6 the rounding of 1 - p itself exceeds the tolerance
    @given(st.floats(1e-6, 1 - 1e-6))
    def test_normal_symmetry(self, p):
        assert normal_quantile(p) == pytest.approx(-normal_quantile(1 - p), abs=1e-9)

    @given(st.floats(1e-6, 1 - 1e-6))
    def test_normal_round_trip(self, p):
        assert float(normal_cdf(normal_quantile(p))) == pytest.approx(p, abs=1e-12)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_normal_domain(self, p):
        with pytest.raises(DomainError):
            normal_quantile(p)
