"""Moran's I and the residual tests."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spatial_bma.errors import ConfigurationError, NumericalError
from spatial_bma.moran import (
    ResidualMoranMoments, design_basis, moran_panel_csv, moran_test_residuals, morans_i,
)
from spatial_bma.synthetic import sar_outcome

from conftest import ring_matrix


class TestMoransI:
    def test_alternating_ring(self):
        assert morans_i([1, -1, 1, -1], ring_matrix(4)) == pytest.approx(-1.0)

    def test_orthogonal_is_zero(self):
        W = ring_matrix(4)
        e = np.array([1.0, 1.0, -1.0, -1.0])
        assert e @ W.to_dense() @ e == pytest.approx(0.0)
        assert morans_i(e, W) == pytest.approx(0.0)

    def test_zero_vector(self):
        with pytest.raises(NumericalError):
            morans_i(np.zeros(4), ring_matrix(4))

    @given(st.floats(1e-3, 1e3))
    def test_scale_invariant(self, c):
        e = np.array([0.3, -1.2, 0.8, 0.1, -0.4, 0.4])
        W = ring_matrix(6)
        assert morans_i(c * e, W) == pytest.approx(morans_i(e, W), rel=1e-10)

    def test_sar_positive(self, menu, rng):
        W = menu["8nn"]
        y = sar_outcome(W, np.zeros(115), 0.6, 1.0, rng)
        assert morans_i(y - y.mean(), W) > 0


class TestMoments:
    def test_expected_value_matches_trace(self, menu, rng):
        W = menu["queen"].to_dense()
        X = rng.standard_normal((115, 3))
        Q = design_basis(X, 115)
        M = np.eye(115) - Q @ Q.T
        mean, var = ResidualMoranMoments(W, Q).moments()
        assert mean == pytest.approx(np.trace(M @ W) / (115 - 4), rel=1e-10)
        MU = M @ (0.5 * (W + W.T))
        second = (2 * np.trace(MU @ MU) + np.trace(MU) ** 2) / ((115 - 4) * (117 - 4))
        assert var == pytest.approx(second - mean**2, rel=1e-10)

    def test_incremental_extension(self, menu, rng):
        W = menu["6nn"].to_dense()
        X = rng.standard_normal((115, 2))
        v = rng.standard_normal(115)
        full = ResidualMoranMoments(W, design_basis(np.column_stack([X, v]), 115)).moments()
        base = ResidualMoranMoments(W, design_basis(X, 115))
        q = v - base.Q @ (base.Q.T @ v)
        q /= np.linalg.norm(q)
        assert np.allclose(base.extended_moments(q), full, rtol=1e-10)
        assert np.allclose(base.extend(q).moments(), full, rtol=1e-10)

    def test_rank_deficient(self):
        X = np.ones((10, 1))
        with pytest.raises(NumericalError):
            design_basis(X, 10)

    def test_normal_moments_match_simulation(self, menu):
        W = menu["8nn"]
        rng = np.random.Generator(np.random.Philox(7))
        X = rng.standard_normal((115, 2))
        Q = design_basis(X, 115)
        draws = []
        for _ in range(4000):
            e = rng.standard_normal(115)
            e = e - Q @ (Q.T @ e)
            draws.append(morans_i(e, W))
        mean, var = ResidualMoranMoments(W.to_dense(), Q).moments()
        assert np.mean(draws) == pytest.approx(mean, abs=4 * np.sqrt(var / 4000))
        assert np.var(draws) == pytest.approx(var, rel=0.1)


class TestResidualTest:
    def test_permutation_floor_and_range(self, menu, rng):
        W = menu["8nn"]
        y = sar_outcome(W, np.zeros(115), 0.9, 1.0, rng)
        r = moran_test_residuals(y, None, W, permutations=99, seed=1)
        assert r.p_value == pytest.approx(1 / 100)
        assert r.method == "permutation(99)"

    def test_reproducible(self, menu, rng):
        y = rng.standard_normal(115)
        a = moran_test_residuals(y, None, menu["queen"], seed=3)
        b = moran_test_residuals(y, None, menu["queen"], seed=3)
        assert a == b

    def test_too_few_permutations(self, menu, rng):
        with pytest.raises(ConfigurationError):
            moran_test_residuals(rng.standard_normal(115), None, menu["queen"], permutations=10)

    def test_two_sided(self, rng):
        W = ring_matrix(40)
        y = np.tile([1.0, -1.0], 20) + 0.1 * rng.standard_normal(40)
        g = moran_test_residuals(y, None, W, method="normal")
        t = moran_test_residuals(y, None, W, method="normal", alternative="two-sided")
        assert g.p_value > 0.99 and t.p_value < 0.01
        t = moran_test_residuals(y, None, W, alternative="two-sided", seed=0)
        assert t.p_value <= 2 / 1000 + 1e-12

    def test_null_rejection_rate(self, menu):
        W = menu["queen"]
        rng = np.random.Generator(np.random.Philox(2024))
        rejections = sum(
            moran_test_residuals(rng.standard_normal(115), None, W, permutations=199, seed=s).p_value < 0.05
            for s in range(500))
        assert abs(rejections / 500 - 0.05) <= 0.03

    def test_methods_agree(self, menu):
        W = menu["6nn"]
        rng = np.random.Generator(np.random.Philox(99))
        for s in range(5):
            y = rng.standard_normal(115)
            X = rng.standard_normal((115, 2))
            a = moran_test_residuals(y, X, W, method="normal")
            b = moran_test_residuals(y, X, W, permutations=1999, seed=s)
            assert abs(a.p_value - b.p_value) < 0.05

    def test_exchangeable_under_relabeling(self, menu, rng):
        W = menu["4nn"].to_dense()
        y = rng.standard_normal(115)
        perm = rng.permutation(115)
        a = moran_test_residuals(y, None, W, method="normal")
        b = moran_test_residuals(y[perm], None, W[np.ix_(perm, perm)], method="normal")
        assert a.I == pytest.approx(b.I, rel=1e-10)
        assert a.p_value == pytest.approx(b.p_value, rel=1e-8)


class TestPanelCsv:
    def test_schema(self):
        text = moran_panel_csv([("1", "ols", 0.5, 0.001), ("1", "filtered", -0.01, 0.6)])
        assert text.splitlines() == ["model_id,stage,I,p", "1,ols,0.5,0.001", "1,filtered,-0.01,0.6"]

    def test_bad_stage(self):
        with pytest.raises(ConfigurationError):
            moran_panel_csv([("1", "raw", 0.0, 1.0)])
