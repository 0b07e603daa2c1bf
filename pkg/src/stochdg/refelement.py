"""Reference-element machinery for tensor-product nodal bases on [-1, 1]^2.

The solution space on each quadrilateral is Q^p, spanned by Lagrange
polynomials at Gauss-Lobatto nodes.  Integration uses a (p+1)-point
Gauss-Legendre rule per direction, which is exact up to degree 2p+1 and
therefore exact for all mass/divergence integrands on straight-sided
(bilinear) elements.  Lagrange evaluation is done in barycentric form so
degrees p >= 8 stay well conditioned.

2-D node index convention: node n = j*(p+1) + i sits at (xi_i, eta_j).
Quadrature points use the same (fastest-in-x) ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "gauss_lobatto_nodes",
    "differentiation_matrix",
    "barycentric_weights",
    "lagrange_eval_matrix",
    "ReferenceElement",
    "reference_element",
    "tensor_basis_eval",
]


def gauss_lobatto_nodes(p: int) -> np.ndarray:
    """Return the p+1 Gauss-Lobatto points on [-1, 1], endpoints included.

    The interior points are the roots of P_p'(x).  Newton iteration on a
    Chebyshev-Lobatto initial guess; converges to machine precision in a
    handful of sweeps.
    """
    if p < 1:
        raise ValueError(f"Gauss-Lobatto nodes need p >= 1, got p={p}")
    n = p + 1
    x = np.cos(np.pi * np.arange(n) / p)[::-1]  # ascending initial guess
    vand = np.zeros((n, n))
    x_prev = 2.0 * np.ones_like(x)
    # Newton on (1 - x^2) P_p'(x) via the Legendre recurrence
    while np.max(np.abs(x - x_prev)) > 1e-15:
        vand[:, 0] = 1.0
        vand[:, 1] = x
        for k in range(1, n - 1):
            vand[:, k + 1] = ((2 * k + 1) * x * vand[:, k] - k * vand[:, k - 1]) / (k + 1)
        x_prev = x.copy()
        x = x_prev - (x * vand[:, n - 1] - vand[:, n - 2]) / (n * vand[:, n - 1])
    x[0], x[-1] = -1.0, 1.0
    # symmetrize so x[i] == -x[p-i] holds exactly
    x = 0.5 * (x - x[::-1])
    return x


def barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    """Barycentric weights for Lagrange interpolation at distinct nodes."""
    nodes = np.asarray(nodes, dtype=float)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    if np.min(np.abs(diff)) == 0.0:
        raise ValueError("interpolation nodes must be distinct")
    return 1.0 / np.prod(diff, axis=1)


def lagrange_eval_matrix(nodes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Matrix L with L[q, i] = ell_i(points[q]) for the nodal basis at `nodes`.

    Barycentric second form; rows at points coinciding with a node reduce to
    exact indicator rows.
    """
    nodes = np.asarray(nodes, dtype=float)
    points = np.atleast_1d(np.asarray(points, dtype=float))
    w = barycentric_weights(nodes)
    diff = points[:, None] - nodes[None, :]
    exact = diff == 0.0
    diff_safe = np.where(exact, 1.0, diff)
    terms = w[None, :] / diff_safe
    out = terms / np.sum(terms, axis=1, keepdims=True)
    hit = exact.any(axis=1)
    out[hit] = exact[hit].astype(float)
    return out


def differentiation_matrix(nodes: np.ndarray) -> np.ndarray:
    """Nodal differentiation matrix: D @ u gives the interpolant derivative at the nodes.

    Exact for polynomials of degree len(nodes)-1; zero row sums by
    construction (the diagonal is the negated off-diagonal sum).
    """
    nodes = np.asarray(nodes, dtype=float)
    w = barycentric_weights(nodes)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    d = (w[None, :] / w[:, None]) / diff
    np.fill_diagonal(d, 0.0)
    np.fill_diagonal(d, -np.sum(d, axis=1))
    return d


def _edge_node_indices(p: int) -> list[np.ndarray]:
    """Tensor node indices along each CCW edge, ordered by the edge parameter.

    Edge k runs from corner k to corner k+1 (corners CCW from (-1,-1));
    along every edge the listed nodes sit at nodes_1d in the edge parameter.
    """
    n = p + 1
    i = np.arange(n)
    return [
        i.copy(),                  # eta = -1, xi ascending
        n - 1 + i * n,             # xi = +1, eta ascending
        n * (n - 1) + (n - 1 - i),  # eta = +1, xi descending
        (n - 1 - i) * n,           # xi = -1, eta descending
    ]


@dataclass(frozen=True)
class ReferenceElement:
    """Degree-p tensor-product Gauss-Lobatto element with Gauss-Legendre quadrature."""

    p: int
    nodes_1d: np.ndarray
    quad_nodes: np.ndarray
    quad_weights: np.ndarray
    diff_1d: np.ndarray
    interp_to_quad: np.ndarray
    edge_nodes: list[np.ndarray] = field(repr=False)
    # 2-D evaluations at the tensor quadrature grid
    basis_at_quad: np.ndarray = field(repr=False)
    dxi_at_quad: np.ndarray = field(repr=False)
    deta_at_quad: np.ndarray = field(repr=False)
    quad_weights_2d: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return (self.p + 1) ** 2

    def nodes_2d(self) -> np.ndarray:
        """(p+1)^2 x 2 array of tensor node coordinates."""
        xi, eta = np.meshgrid(self.nodes_1d, self.nodes_1d, indexing="xy")
        return np.column_stack([xi.ravel(), eta.ravel()])

    def tensor_basis_eval(self, point) -> np.ndarray:
        """All (p+1)^2 basis values at one reference point (extrapolates outside)."""
        return tensor_basis_eval(self, point)


def tensor_basis_eval(ref: ReferenceElement, point) -> np.ndarray:
    xi, eta = float(point[0]), float(point[1])
    lx = lagrange_eval_matrix(ref.nodes_1d, np.array([xi]))[0]
    ly = lagrange_eval_matrix(ref.nodes_1d, np.array([eta]))[0]
    return np.kron(ly, lx)


@lru_cache(maxsize=None)
def reference_element(p: int) -> ReferenceElement:
    """Build (and cache) the degree-p reference element."""
    nodes = gauss_lobatto_nodes(p)
    qx, qw = np.polynomial.legendre.leggauss(p + 1)
    d1 = differentiation_matrix(nodes)
    interp = lagrange_eval_matrix(nodes, qx)
    interp_d = interp @ d1  # derivative values at quadrature points
    basis = np.kron(interp, interp)
    dxi = np.kron(interp, interp_d)
    deta = np.kron(interp_d, interp)
    w2 = np.kron(qw, qw)
    return ReferenceElement(
        p=p,
        nodes_1d=nodes,
        quad_nodes=qx,
        quad_weights=qw,
        diff_1d=d1,
        interp_to_quad=interp,
        edge_nodes=_edge_node_indices(p),
        basis_at_quad=basis,
        dxi_at_quad=dxi,
        deta_at_quad=deta,
        quad_weights_2d=w2,
    )
