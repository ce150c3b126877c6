from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmarl.analysis import (
    complexity_point,
    complexity_table,
    eta,
    eta_exact,
    eta_gradients,
    finite_difference_gradients,
    regime,
)
from hmarl.errors import InvalidArgument

ints = st.integers(1, 12)


class TestEta:
    def test_reference_point(self):
        assert eta_exact(2, 4, 8) == Fraction(144, 28)
        assert eta(2, 4, 8) == pytest.approx(144 / 28, abs=1e-12)

    @pytest.mark.parametrize("K", [1, 2, 5, 17])
    def test_unity_when_tile_and_focal_terms_match(self, K):
        assert eta(K, 6, 3) == 1.0

    def test_saturated_limit(self):
        assert abs(eta(10, 50, 8) - 1.0) < 1e-6
        p = complexity_point(10, 400, 8)
        assert p.saturated and p.eta == 1.0 and p.regime == "saturated"
        assert (p.d_eta_dN, p.d_eta_dL, p.d_eta_dK) == (0.0, 0.0, 0.0)

    @given(ints, ints, ints)
    def test_at_least_one_iff_tiles_dominate_focals(self, K, L, N):
        assert (eta_exact(K, L, N) >= 1) == (2 * N * N >= 3 * L)

    @given(st.integers(1, 6), st.integers(1, 8))
    def test_increasing_in_n(self, K, L):
        vals = [eta_exact(K, L, N) for N in range(1, 65)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_regime(self):
        assert regime(2, 4, 8) == "efficient"
        assert regime(2, 7, 8) == "saturated"  # 128 == 2 * 64, strict test
        assert regime(2, 8, 8) == "saturated"

    @pytest.mark.parametrize("bad", [0, -1, float("nan"), float("inf"), True, "2"])
    def test_invalid(self, bad):
        with pytest.raises(InvalidArgument):
            eta(bad, 4, 8)

    def test_real_valued_arguments(self):
        assert eta(2.0, 4.0, 8.0) == pytest.approx(144 / 28, rel=1e-15)

    def test_table_order(self):
        rows = complexity_table([2, 3], [1], [4, 5])
        assert [(p.K, p.N) for p in rows] == [(2, 4), (2, 5), (3, 4), (3, 5)]
        assert set(rows[0].as_dict()) >= {"eta", "regime", "saturated"}


class TestGradients:
    def test_reference_point_signs(self):
        dN, dL, dK = eta_gradients(2, 4, 8)
        assert dN > 0 and dL < 0 and dK < 0
        assert dN == pytest.approx(32 / 28, rel=1e-15)

    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            K, L, N = rng.uniform(1.5, 6), rng.uniform(1.5, 8), rng.uniform(1.5, 30)
            np.testing.assert_allclose(eta_gradients(K, L, N), finite_difference_gradients(K, L, N), rtol=1e-6)

    @given(ints, ints, ints)
    def test_n_gradient_positive(self, K, L, N):
        assert eta_gradients(K, L, N)[0] > 0

    @given(st.integers(2, 8), st.integers(1, 10), st.integers(1, 40))
    def test_signs_where_tiles_dominate(self, K, L, N):
        if 2 * N * N > 3 * L:
            _, dL, dK = eta_gradients(K, L, N)
            assert dL < 0 and dK < 0
