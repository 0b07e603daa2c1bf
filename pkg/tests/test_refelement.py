"""Reference-element tests: node placement, quadrature exactness, differentiation."""

import numpy as np
import pytest

from stochdg.refelement import (
    ReferenceElement,
    differentiation_matrix,
    gauss_lobatto_nodes,
    lagrange_eval_matrix,
    reference_element,
    tensor_basis_eval,
)


def bisect_lobatto_interior(p):
    """Independent oracle: interior Gauss-Lobatto points are roots of P_p'."""
    dlegendre = np.polynomial.legendre.Legendre.basis(p).deriv()
    xs = np.linspace(-1, 1, 20001)
    vals = dlegendre(xs)
    roots = []
    for a, b, fa, fb in zip(xs[:-1], xs[1:], vals[:-1], vals[1:]):
        if fa == 0.0:
            roots.append(a)
        elif fa * fb < 0:
            lo, hi = a, b
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if dlegendre(lo) * dlegendre(mid) <= 0:
                    hi = mid
                else:
                    lo = mid
            roots.append(0.5 * (lo + hi))
    return np.array(roots)


class TestGaussLobattoNodes:
    def test_p1_endpoints(self):
        np.testing.assert_array_equal(gauss_lobatto_nodes(1), [-1.0, 1.0])

    def test_p2_symmetry_forced(self):
        np.testing.assert_allclose(gauss_lobatto_nodes(2), [-1.0, 0.0, 1.0], atol=1e-15)

    def test_p4_against_closed_form_and_bisection(self):
        nodes = gauss_lobatto_nodes(4)
        expected = np.array([-1.0, -np.sqrt(3.0 / 7.0), 0.0, np.sqrt(3.0 / 7.0), 1.0])
        np.testing.assert_allclose(nodes, expected, atol=1e-14)
        np.testing.assert_allclose(nodes[1:-1], bisect_lobatto_interior(4), atol=1e-10)

    @pytest.mark.parametrize("p", [3, 5, 8, 12])
    def test_interior_roots_by_bisection(self, p):
        nodes = gauss_lobatto_nodes(p)
        assert nodes[0] == -1.0 and nodes[-1] == 1.0
        assert np.all(np.diff(nodes) > 0)
        np.testing.assert_allclose(nodes[1:-1], bisect_lobatto_interior(p), atol=1e-10)

    def test_symmetric_about_zero(self):
        for p in range(1, 10):
            nodes = gauss_lobatto_nodes(p)
            np.testing.assert_array_equal(nodes, -nodes[::-1])

    def test_p0_unsupported(self):
        with pytest.raises(ValueError):
            gauss_lobatto_nodes(0)


class TestQuadrature:
    @pytest.mark.parametrize("p", [1, 2, 4, 7])
    def test_weights_positive_sum_two(self, p):
        ref = reference_element(p)
        assert np.all(ref.quad_weights > 0)
        np.testing.assert_allclose(ref.quad_weights.sum(), 2.0, rtol=1e-14)

    @pytest.mark.parametrize("p", [1, 2, 3, 5])
    def test_monomial_exactness_up_to_2p_plus_1(self, p):
        ref = reference_element(p)
        for k in range(2 * p + 2):
            exact = 0.0 if k % 2 else 2.0 / (k + 1)
            approx = ref.quad_weights @ ref.quad_nodes**k
            assert abs(approx - exact) < 1e-13


class TestDifferentiationMatrix:
    def test_p1_slope(self):
        d = differentiation_matrix(np.array([-1.0, 1.0]))
        np.testing.assert_allclose(d, [[-0.5, 0.5], [-0.5, 0.5]], atol=1e-15)

    def test_kills_constants(self):
        for p in (1, 3, 6):
            d = reference_element(p).diff_1d
            np.testing.assert_allclose(d @ np.ones(p + 1), 0.0, atol=1e-13)
            np.testing.assert_allclose(d.sum(axis=1), 0.0, atol=1e-13)

    @pytest.mark.parametrize("p", [2, 4, 8])
    def test_exact_polynomial_differentiation(self, p):
        ref = reference_element(p)
        x = ref.nodes_1d
        for k in range(1, p + 1):
            np.testing.assert_allclose(ref.diff_1d @ x**k, k * x ** (k - 1),
                                       atol=1e-12 * max(1, p**2))

    def test_duplicate_nodes_rejected(self):
        with pytest.raises(ValueError):
            differentiation_matrix(np.array([0.0, 0.0, 1.0]))


class TestInterpolation:
    def test_rows_sum_to_one(self):
        ref = reference_element(4)
        np.testing.assert_allclose(ref.interp_to_quad.sum(axis=1), 1.0, rtol=1e-13)

    def test_nodal_rows_are_indicators(self):
        nodes = gauss_lobatto_nodes(5)
        mat = lagrange_eval_matrix(nodes, nodes)
        np.testing.assert_array_equal(mat, np.eye(6))


class TestTensorBasis:
    def test_indicator_at_nodes(self):
        ref = reference_element(3)
        nodes2 = ref.nodes_2d()
        for n in (0, 5, 15):
            vals = tensor_basis_eval(ref, nodes2[n])
            expected = np.zeros(ref.n_nodes)
            expected[n] = 1.0
            np.testing.assert_allclose(vals, expected, atol=1e-13)

    def test_partition_of_unity_off_node(self):
        ref = reference_element(4)
        vals = tensor_basis_eval(ref, (0.3, -0.7))
        np.testing.assert_allclose(vals.sum(), 1.0, atol=1e-12)

    def test_p2_center_node(self):
        ref = reference_element(2)
        vals = tensor_basis_eval(ref, (0.0, 0.0))
        expected = np.zeros(9)
        expected[4] = 1.0  # center of the 3x3 tensor grid
        np.testing.assert_allclose(vals, expected, atol=1e-14)

    def test_extrapolation_is_permitted(self):
        ref = reference_element(2)
        vals = tensor_basis_eval(ref, (1.5, 0.2))
        assert np.all(np.isfinite(vals))
        np.testing.assert_allclose(vals.sum(), 1.0, atol=1e-12)


def test_mass_exact_for_qp_products_on_affine_elements():
    # (p+1)-point tensor Gauss-Legendre integrates Q^p * Q^p exactly
    p = 3
    ref = reference_element(p)
    rng = np.random.default_rng(0)
    c1, c2 = rng.standard_normal((2, p + 1, p + 1))

    def poly(c, x, y):
        return np.polynomial.polynomial.polyval2d(x, y, c)

    xq, yq = np.meshgrid(ref.quad_nodes, ref.quad_nodes, indexing="xy")
    approx = np.sum(ref.quad_weights_2d
                    * (poly(c1, xq.ravel(), yq.ravel()) * poly(c2, xq.ravel(), yq.ravel())))
    # oracle: high-order quadrature
    xg, wg = np.polynomial.legendre.leggauss(3 * p)
    xq2, yq2 = np.meshgrid(xg, xg, indexing="xy")
    w2 = np.kron(wg, wg)
    exact = np.sum(w2 * poly(c1, xq2.ravel(), yq2.ravel()) * poly(c2, xq2.ravel(), yq2.ravel()))
    np.testing.assert_allclose(approx, exact, rtol=1e-13)
