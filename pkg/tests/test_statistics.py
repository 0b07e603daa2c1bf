"""Covariance accumulators and diagnostic metrics."""

import numpy as np
import pytest

from stochdg.statistics import (
    CovarianceAccumulator,
    LagCovarianceAccumulator,
    RowSubsetAccumulator,
    mass_identity_deviation,
    relative_frobenius_error,
    row_correlation,
)


class TestCovarianceAccumulator:
    def test_single_sample(self):
        acc = CovarianceAccumulator(3)
        u = np.array([1.0, -2.0, 0.5])
        acc.accumulate(u)
        np.testing.assert_array_equal(acc.second_moment(), np.outer(u, u))

    def test_plus_minus_pair(self):
        acc = CovarianceAccumulator(2)
        u = np.array([1.0, 3.0])
        acc.accumulate(u).accumulate(-u)
        np.testing.assert_array_equal(acc.second_moment(), np.outer(u, u))
        np.testing.assert_array_equal(acc.mean(), [0.0, 0.0])

    def test_block_equals_loop(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((50, 4))
        a = CovarianceAccumulator(4)
        b = CovarianceAccumulator(4)
        for row in x:
            a.accumulate(row)
        b.observe_block(np.arange(50), x)
        np.testing.assert_allclose(a.sum_outer, b.sum_outer, rtol=1e-13)
        assert a.count == b.count

    def test_merge_matches_concatenation(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2000, 5))
        whole = CovarianceAccumulator(5)
        whole.observe_block(None, x)
        left = CovarianceAccumulator(5)
        right = CovarianceAccumulator(5)
        left.observe_block(None, x[:777])
        right.observe_block(None, x[777:])
        merged = left.merge(right)
        assert merged.count == whole.count
        num = np.linalg.norm(merged.sum_outer - whole.sum_outer)
        assert num <= 1e-12 * np.linalg.norm(whole.sum_outer)

    def test_iid_normal_identity_within_5_se(self):
        rng = np.random.default_rng(7)
        n, d = 1_000_000, 6
        acc = CovarianceAccumulator(d)
        for start in range(0, n, 200_000):
            acc.observe_block(None, rng.standard_normal((200_000, d)))
        emp = acc.second_moment()
        se = np.sqrt((1.0 + np.eye(d)) / n)  # Var(C_ij) = (C_ii C_jj + C_ij^2)/n
        assert np.max(np.abs(emp - np.eye(d)) / se) <= 5.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            CovarianceAccumulator(2).second_moment()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            CovarianceAccumulator(2).accumulate(np.ones(3))

    def test_dense_cap(self):
        with pytest.raises(ValueError, match="RowSubsetAccumulator"):
            CovarianceAccumulator(5000)


class TestRowSubsetAccumulator:
    def test_matches_dense(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((400, 8))
        dense = CovarianceAccumulator(8)
        dense.observe_block(None, x)
        sub = RowSubsetAccumulator(8, rows=[1, 5])
        sub.observe_block(None, x)
        full = dense.second_moment()
        np.testing.assert_allclose(sub.diagonal(), np.diag(full), rtol=1e-13)
        np.testing.assert_allclose(sub.row(5), full[5], rtol=1e-13)
        with pytest.raises(KeyError):
            sub.row(3)


class TestLagAccumulator:
    def test_against_bruteforce(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((257, 3))
        lags = [0, 1, 7]
        acc = LagCovarianceAccumulator(3, lags)
        # stream in uneven blocks to exercise the tail handling
        for sl in (slice(0, 50), slice(50, 53), slice(53, 200), slice(200, 257)):
            acc.observe_block(None, x[sl])
        for k in lags:
            pairs = [(x[i + k], x[i]) for i in range(257 - k)]
            brute = sum(np.outer(a, b) for a, b in pairs) / len(pairs)
            np.testing.assert_allclose(acc.lag_moment(k), brute, rtol=1e-12)


class TestMetrics:
    def test_relative_error_trivial(self):
        c = np.array([[2.0, 0.1], [0.1, 1.0]])
        assert relative_frobenius_error(c, c) == 0.0
        assert relative_frobenius_error(2 * c, c) == pytest.approx(1.0)

    def test_zero_target_rejected(self):
        with pytest.raises(ValueError):
            relative_frobenius_error(np.eye(2), np.zeros((2, 2)))

    def test_mass_identity_deviation(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((5, 5))
        m = a @ a.T + 5 * np.eye(5)
        w = np.linalg.inv(m)
        prod, dev = mass_identity_deviation(m, w)
        np.testing.assert_allclose(prod, np.eye(5), atol=1e-12)
        assert dev <= 1e-12
        _, dev0 = mass_identity_deviation(m, np.zeros((5, 5)))
        assert dev0 == pytest.approx(1.0)

    def test_row_correlation_indicator(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((6, 6))
        m = a @ a.T + 6 * np.eye(6)
        w = np.linalg.inv(m)
        row = row_correlation(w, m, 2)
        expected = np.zeros(6)
        expected[2] = 1.0
        np.testing.assert_allclose(row, expected, atol=1e-12)

    def test_row_column_consistency_for_symmetric_inputs(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((4, 4))
        m = a @ a.T + 4 * np.eye(4)
        c = rng.standard_normal((4, 4))
        c = c @ c.T
        prod = m @ c
        for i in range(4):
            np.testing.assert_allclose(row_correlation(c, m, i), prod[i], rtol=1e-13)
            np.testing.assert_allclose(row_correlation(c, m, i), prod.T[:, i].T, rtol=1e-13)

    def test_row_index_bounds(self):
        with pytest.raises(IndexError):
            row_correlation(np.eye(3), np.eye(3), 3)
