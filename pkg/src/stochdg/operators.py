"""Global DG operators on quad meshes: mass M, divergence D, penalty E.

The scheme is the minimal-dissipation LDG discretization of the Laplacian:
interior numerical fluxes take the solution trace from the minus side and
the flux trace from the plus side (the one-sided switch; minus = lower
element index), with zero interior penalty.  The composite operator is
``A = -D M^-1 D^T + E`` and the generator is ``L = M^-1 A``.

The gradient operator is *defined* as -D^T, which keeps A symmetric under
any quadrature.  An independently assembled gradient is provided for
verification; on straight-sided (bilinear) elements the (p+1)-point
Gauss-Legendre rule integrates every term exactly, so the two agree to
round-off.  On curved elements the quadrature is inexact (standard
variational crime) and only the -D^T definition is used.

Boundary regimes:

* periodic / Neumann: boundary solution trace is one-sided, no flux terms,
  E = 0; the generator has the constant vector in its null space.
* weak Dirichlet: boundary flux sigma^- with penalty -c11 * u^-; E is
  block-diagonal, nonzero only on elements touching the boundary.
* strong Dirichlet: boundary nodal values are pinned.  With the diagonal
  interior mask I~ and the masked inverse mass C~ = I~ M^-1 I~, the
  generator is L~ = -C~ D M^-1 D^T I~, whose stationary covariance under
  the matched noise is exactly C~.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .meshes import (
    B_EDGE,
    B_ELEM,
    B_TAG,
    F_EDGEMINUS,
    F_EDGEPLUS,
    F_EMINUS,
    F_EPLUS,
    F_FLIP,
    BoundaryTag,
    MeshError,
    QuadMesh,
    element_areas,
)
from .refelement import (
    ReferenceElement,
    _edge_node_indices,
    differentiation_matrix,
    gauss_lobatto_nodes,
    lagrange_eval_matrix,
    reference_element,
)

__all__ = [
    "Regime",
    "BoundaryConditionSpec",
    "LdgParameters",
    "ElementBlockMatrix",
    "FaceCoupledOperator",
    "DGSystem",
    "ConfigurationError",
    "assemble_mass",
    "assemble_divergence",
    "assemble_gradient",
    "assemble_penalty",
    "boundary_dof_indices",
    "build_system",
    "laplacian_apply",
    "sigma_solve",
    "mean_zero_project",
    "solve_deterministic_heat",
    "l2_error",
]


class ConfigurationError(ValueError):
    """Operator/BC configuration inconsistent with the mesh or regime."""


class Regime(enum.Enum):
    PERIODIC = "periodic"
    NEUMANN = "neumann"
    DIRICHLET_WEAK = "dirichlet_weak"
    DIRICHLET_STRONG = "dirichlet_strong"

    @property
    def mean_zero(self) -> bool:
        return self in (Regime.PERIODIC, Regime.NEUMANN)

    @property
    def dirichlet(self) -> bool:
        return self in (Regime.DIRICHLET_WEAK, Regime.DIRICHLET_STRONG)


@dataclass(frozen=True)
class BoundaryConditionSpec:
    """Boundary regime plus (optional) boundary data callables of (x, y)."""

    regime: Regime
    g_dirichlet: Optional[Callable] = None
    g_neumann: Optional[Callable] = None


@dataclass(frozen=True)
class LdgParameters:
    """LDG parameters: interior penalty is identically zero (minimal dissipation).

    c11_boundary: penalty on Dirichlet boundary faces.  None selects the
    default scaling (p+1)^2 / h_face per face; a float applies uniformly.
    The one-sided switch is realized by the mesh face-orientation rule.
    """

    c11_boundary: Optional[float] = None

    def c11_values(self, p: int, face_h: np.ndarray) -> np.ndarray:
        if self.c11_boundary is None:
            return (p + 1) ** 2 / face_h
        return np.full_like(face_h, float(self.c11_boundary))


class ElementBlockMatrix:
    """Block-diagonal operator with one dense block per element."""

    def __init__(self, blocks: np.ndarray):
        blocks = np.ascontiguousarray(blocks, dtype=float)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise ValueError("blocks must be (n_elements, m, m)")
        self.blocks = blocks

    @property
    def n_elements(self) -> int:
        return self.blocks.shape[0]

    @property
    def block_size(self) -> int:
        return self.blocks.shape[1]

    @property
    def n_dof(self) -> int:
        return self.n_elements * self.block_size

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Blockwise matvec; u may be (..., n_dof)."""
        nt, m = self.n_elements, self.block_size
        shape = u.shape
        v = u.reshape(-1, nt, m)
        out = np.einsum("eij,kej->kei", self.blocks, v)
        return np.ascontiguousarray(out).reshape(shape)

    def to_dense(self) -> np.ndarray:
        nt, m = self.n_elements, self.block_size
        out = np.zeros((nt * m, nt * m))
        for e in range(nt):
            out[e * m:(e + 1) * m, e * m:(e + 1) * m] = self.blocks[e]
        return out

    def to_bsr(self) -> sp.bsr_matrix:
        nt, m = self.n_elements, self.block_size
        return sp.bsr_matrix(
            (self.blocks, np.arange(nt), np.arange(nt + 1)),
            shape=(nt * m, nt * m),
        )

    def vector_blocks(self) -> "ElementBlockMatrix":
        """Same blocks repeated per component, matching the vector DOF layout."""
        return ElementBlockMatrix(np.repeat(self.blocks, 2, axis=0))


class FaceCoupledOperator:
    """Sparse divergence operator D mapping vector DOFs (2N) to scalar DOFs (N).

    The gradient operator of the mixed system is -D^T.  Couplings never
    reach past face neighbours, so application is O(N).
    """

    def __init__(self, matrix: sp.csr_matrix, n_scalar: int):
        self.matrix = matrix.tocsr()
        self.n_scalar = n_scalar

    def apply(self, sigma: np.ndarray) -> np.ndarray:
        return self.matrix @ sigma

    def apply_transpose(self, u: np.ndarray) -> np.ndarray:
        return self.matrix.T @ u

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


# ---------------------------------------------------------------------------
# geometry caches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _VolumeGeometry:
    x_q: np.ndarray      # (nt, nq2, 2) physical quadrature points
    wdet: np.ndarray     # (nt, nq2) quadrature weight times det J
    adj: np.ndarray      # (nt, nq2, 2, 2) adjugate of J (det J times J^-1)
    x_nodes: np.ndarray  # (nt, m, 2) physical solution-node coordinates


def _volume_geometry(mesh: QuadMesh, ref: ReferenceElement) -> _VolumeGeometry:
    gnodes = gauss_lobatto_nodes(mesh.p_geo)
    li = lagrange_eval_matrix(gnodes, ref.quad_nodes)
    ld = li @ differentiation_matrix(gnodes)
    b = np.kron(li, li)
    bxi = np.kron(li, ld)
    beta = np.kron(ld, li)
    x_q = np.einsum("qg,egd->eqd", b, mesh.geom_nodes)
    x_xi = np.einsum("qg,egd->eqd", bxi, mesh.geom_nodes)
    x_eta = np.einsum("qg,egd->eqd", beta, mesh.geom_nodes)
    det = x_xi[..., 0] * x_eta[..., 1] - x_xi[..., 1] * x_eta[..., 0]
    if np.min(det) <= 0.0:
        e = int(np.argmin(np.min(det, axis=1)))
        raise MeshError(f"nonpositive Jacobian at a quadrature point of element {e}")
    adj = np.empty(det.shape + (2, 2))
    adj[..., 0, 0] = x_eta[..., 1]
    adj[..., 0, 1] = -x_eta[..., 0]
    adj[..., 1, 0] = -x_xi[..., 1]
    adj[..., 1, 1] = x_xi[..., 0]
    ln = lagrange_eval_matrix(gnodes, ref.nodes_1d)
    bn = np.kron(ln, ln)
    x_nodes = np.einsum("qg,egd->eqd", bn, mesh.geom_nodes)
    return _VolumeGeometry(x_q=x_q, wdet=ref.quad_weights_2d[None, :] * det,
                           adj=adj, x_nodes=x_nodes)


@dataclass(frozen=True)
class _FaceGeometry:
    weights: np.ndarray  # (nf, nq) quadrature weight times arclength factor
    normal: np.ndarray   # (nf, nq, 2) outward unit normal of the minus side
    x_q: np.ndarray      # (nf, nq, 2) physical face quadrature points


def _face_geometry(mesh: QuadMesh, ref: ReferenceElement,
                   elems: np.ndarray, edges: np.ndarray) -> _FaceGeometry:
    gnodes = gauss_lobatto_nodes(mesh.p_geo)
    lg = lagrange_eval_matrix(gnodes, ref.quad_nodes)
    lgd = lg @ differentiation_matrix(gnodes)
    geo_edges = np.stack(_edge_node_indices(mesh.p_geo))
    ge = mesh.geom_nodes[elems[:, None], geo_edges[edges], :]  # (nf, pg+1, 2)
    x = np.einsum("qg,fgd->fqd", lg, ge)
    t = np.einsum("qg,fgd->fqd", lgd, ge)
    ds = np.hypot(t[..., 0], t[..., 1])
    if np.min(ds) <= 0.0:
        raise MeshError("degenerate face (zero tangent)")
    normal = np.stack([t[..., 1] / ds, -t[..., 0] / ds], axis=-1)
    return _FaceGeometry(weights=ref.quad_weights[None, :] * ds, normal=normal, x_q=x)


def _trace_matrices(ref: ReferenceElement) -> tuple[np.ndarray, np.ndarray]:
    """Edge-nodal basis values at face quadrature params t and -t."""
    ls = lagrange_eval_matrix(ref.nodes_1d, ref.quad_nodes)
    ls_flip = lagrange_eval_matrix(ref.nodes_1d, -ref.quad_nodes)
    return ls, ls_flip


def _plus_trace(ref: ReferenceElement, flip: np.ndarray) -> np.ndarray:
    ls, ls_flip = _trace_matrices(ref)
    pair = np.stack([ls, ls_flip])
    return pair[flip]  # (nf, nq, p+1)


def _check_face_conformity(mesh: QuadMesh, ref: ReferenceElement) -> None:
    """Shared-edge geometry must coincide pointwise between the two sides."""
    faces = mesh.interior_faces
    if faces.size == 0:
        return
    minus = _face_geometry(mesh, ref, faces[:, F_EMINUS], faces[:, F_EDGEMINUS])
    gnodes = gauss_lobatto_nodes(mesh.p_geo)
    geo_edges = np.stack(_edge_node_indices(mesh.p_geo))
    ge_plus = mesh.geom_nodes[faces[:, F_EPLUS][:, None], geo_edges[faces[:, F_EDGEPLUS]], :]
    lg = lagrange_eval_matrix(gnodes, ref.quad_nodes)
    lg_flip = lagrange_eval_matrix(gnodes, -ref.quad_nodes)
    pair = np.stack([lg, lg_flip])
    xp = np.einsum("fqg,fgd->fqd", pair[faces[:, F_FLIP]], ge_plus)
    mismatch = np.abs(xp - minus.x_q)
    periodic = faces[:, 5] == 1
    mismatch[periodic] = 0.0  # periodic copies differ by the translation
    scale = max(1.0, float(np.max(np.abs(mesh.vertices))))
    if np.max(mismatch) > 1e-9 * scale:
        f = int(np.argmax(np.max(mismatch, axis=(1, 2))))
        raise MeshError(f"non-conforming geometry on interior face {f}")


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def assemble_mass(mesh: QuadMesh, ref: ReferenceElement,
                  geom: Optional[_VolumeGeometry] = None) -> ElementBlockMatrix:
    """Block-diagonal mass matrix, SPD per element."""
    geom = geom or _volume_geometry(mesh, ref)
    blocks = np.einsum("qi,eq,qj->eij", ref.basis_at_quad, geom.wdet, ref.basis_at_quad)
    return ElementBlockMatrix(blocks)


def _volume_vc(mesh: QuadMesh, ref: ReferenceElement, geom: _VolumeGeometry):
    """V_c[e, i, j] = integral of phi_j * d(phi_i)/dx_c over element e.

    Uses the adjugate directly (w * adj^T grad_ref), so no division by det J.
    """
    gx = (geom.adj[..., 0, 0, None] * ref.dxi_at_quad[None]
          + geom.adj[..., 1, 0, None] * ref.deta_at_quad[None])
    gy = (geom.adj[..., 0, 1, None] * ref.dxi_at_quad[None]
          + geom.adj[..., 1, 1, None] * ref.deta_at_quad[None])
    w2 = ref.quad_weights_2d
    vx = np.einsum("q,eqi,qj->eij", w2, gx, ref.basis_at_quad)
    vy = np.einsum("q,eqi,qj->eij", w2, gy, ref.basis_at_quad)
    return vx, vy


def _dirichlet_boundary_rows(mesh: QuadMesh, bc: BoundaryConditionSpec) -> np.ndarray:
    bf = mesh.boundary_faces
    if bc.regime is Regime.PERIODIC:
        if bf.shape[0]:
            raise ConfigurationError(
                "periodic regime requires a fully paired mesh; "
                f"{bf.shape[0]} boundary faces remain")
        return bf[:0]
    want = BoundaryTag.NEUMANN if bc.regime is Regime.NEUMANN else BoundaryTag.DIRICHLET
    tags = bf[:, B_TAG] if bf.size else np.zeros(0, int)
    bad = (tags != int(want))
    if np.any(bad):
        raise ConfigurationError(
            f"regime {bc.regime.value} expects boundary tag {want.name.lower()} "
            f"on all boundary faces; retag the mesh")
    return bf if bc.regime.dirichlet else bf[:0]


def assemble_divergence(mesh: QuadMesh, ref: ReferenceElement,
                        params: LdgParameters, bc: BoundaryConditionSpec,
                        geom: Optional[_VolumeGeometry] = None) -> FaceCoupledOperator:
    """The divergence operator D of the mixed LDG system (csr, N x 2N)."""
    geom = geom or _volume_geometry(mesh, ref)
    nt, m = mesh.n_elements, ref.n_nodes
    n = nt * m
    vx, vy = _volume_vc(mesh, ref, geom)
    rows, cols, data = [], [], []

    e_idx = np.arange(nt)
    i_idx = np.arange(m)
    r_vol = (e_idx[:, None, None] * m + i_idx[None, :, None]) + np.zeros((1, 1, m), int)
    for c, vc in ((0, vx), (1, vy)):
        c_vol = (e_idx[:, None, None] * 2 * m + c * m + i_idx[None, None, :]) + np.zeros((1, m, 1), int)
        rows.append(r_vol.ravel())
        cols.append(c_vol.ravel())
        data.append(-vc.ravel())

    sol_edges = np.stack(_edge_node_indices(ref.p))
    ls, _ = _trace_matrices(ref)

    faces = mesh.interior_faces
    if faces.size:
        em, km = faces[:, F_EMINUS], faces[:, F_EDGEMINUS]
        ep, kp = faces[:, F_EPLUS], faces[:, F_EDGEPLUS]
        fg = _face_geometry(mesh, ref, em, km)
        lp = _plus_trace(ref, faces[:, F_FLIP])
        se_m = sol_edges[km]  # (nf, p+1)
        se_p = sol_edges[kp]
        rows_minus = em[:, None] * m + se_m
        rows_plus = ep[:, None] * m + se_p
        for c in range(2):
            wn = fg.weights * fg.normal[..., c]
            b1 = np.einsum("qa,fq,fqb->fab", ls, wn, lp)
            b2 = np.einsum("fqa,fq,fqb->fab", lp, wn, lp)
            cols_p = ep[:, None] * 2 * m + c * m + se_p
            rows.append(np.broadcast_to(rows_minus[:, :, None], b1.shape).ravel())
            cols.append(np.broadcast_to(cols_p[:, None, :], b1.shape).ravel())
            data.append(b1.ravel())
            rows.append(np.broadcast_to(rows_plus[:, :, None], b2.shape).ravel())
            cols.append(np.broadcast_to(cols_p[:, None, :], b2.shape).ravel())
            data.append(-b2.ravel())

    dirichlet_faces = _dirichlet_boundary_rows(mesh, bc)
    if dirichlet_faces.size:
        eb, kb = dirichlet_faces[:, B_ELEM], dirichlet_faces[:, B_EDGE]
        fg = _face_geometry(mesh, ref, eb, kb)
        se = sol_edges[kb]
        rows_b = eb[:, None] * m + se
        for c in range(2):
            wn = fg.weights * fg.normal[..., c]
            b0 = np.einsum("qa,fq,qb->fab", ls, wn, ls)
            cols_b = eb[:, None] * 2 * m + c * m + se
            rows.append(np.broadcast_to(rows_b[:, :, None], b0.shape).ravel())
            cols.append(np.broadcast_to(cols_b[:, None, :], b0.shape).ravel())
            data.append(b0.ravel())

    mat = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, 2 * n),
    ).tocsr()
    return FaceCoupledOperator(mat, n)


def assemble_gradient(mesh: QuadMesh, ref: ReferenceElement,
                      params: LdgParameters, bc: BoundaryConditionSpec,
                      geom: Optional[_VolumeGeometry] = None) -> sp.csr_matrix:
    """Independently assembled gradient bilinear form (2N x N).

    Equals -D^T entrywise whenever the quadrature integrates the face and
    volume terms exactly (all straight-sided meshes); used as the adjoint
    cross-check of ``assemble_divergence``.
    """
    geom = geom or _volume_geometry(mesh, ref)
    nt, m = mesh.n_elements, ref.n_nodes
    n = nt * m
    vx, vy = _volume_vc(mesh, ref, geom)
    rows, cols, data = [], [], []

    e_idx = np.arange(nt)
    i_idx = np.arange(m)
    for c, vc in ((0, vx), (1, vy)):
        r_vol = (e_idx[:, None, None] * 2 * m + c * m + i_idx[None, :, None]) + np.zeros((1, 1, m), int)
        c_vol = (e_idx[:, None, None] * m + i_idx[None, None, :]) + np.zeros((1, m, 1), int)
        rows.append(r_vol.ravel())
        cols.append(c_vol.ravel())
        data.append(-vc.ravel())

    sol_edges = np.stack(_edge_node_indices(ref.p))
    ls, _ = _trace_matrices(ref)

    faces = mesh.interior_faces
    if faces.size:
        em, km = faces[:, F_EMINUS], faces[:, F_EDGEMINUS]
        ep, kp = faces[:, F_EPLUS], faces[:, F_EDGEPLUS]
        fg = _face_geometry(mesh, ref, em, km)
        lp = _plus_trace(ref, faces[:, F_FLIP])
        se_m = sol_edges[km]
        se_p = sol_edges[kp]
        cols_m = em[:, None] * m + se_m
        for c in range(2):
            wn = fg.weights * fg.normal[..., c]
            g1 = np.einsum("qa,fq,qb->fab", ls, wn, ls)       # tau from minus
            g2 = np.einsum("fqa,fq,qb->fab", lp, wn, ls)      # tau from plus
            rows_m = em[:, None] * 2 * m + c * m + se_m
            rows_p = ep[:, None] * 2 * m + c * m + se_p
            rows.append(np.broadcast_to(rows_m[:, :, None], g1.shape).ravel())
            cols.append(np.broadcast_to(cols_m[:, None, :], g1.shape).ravel())
            data.append(g1.ravel())
            rows.append(np.broadcast_to(rows_p[:, :, None], g2.shape).ravel())
            cols.append(np.broadcast_to(cols_m[:, None, :], g2.shape).ravel())
            data.append(-g2.ravel())

    if bc.regime in (Regime.NEUMANN,):
        bf = mesh.boundary_faces
        if bf.size:
            eb, kb = bf[:, B_ELEM], bf[:, B_EDGE]
            fg = _face_geometry(mesh, ref, eb, kb)
            se = sol_edges[kb]
            cols_b = eb[:, None] * m + se
            for c in range(2):
                wn = fg.weights * fg.normal[..., c]
                g0 = np.einsum("qa,fq,qb->fab", ls, wn, ls)
                rows_b = eb[:, None] * 2 * m + c * m + se
                rows.append(np.broadcast_to(rows_b[:, :, None], g0.shape).ravel())
                cols.append(np.broadcast_to(cols_b[:, None, :], g0.shape).ravel())
                data.append(g0.ravel())
    # Dirichlet boundary: u-hat is data, no operator term

    return sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * n, n),
    ).tocsr()


def assemble_penalty(mesh: QuadMesh, ref: ReferenceElement,
                     params: LdgParameters, bc: BoundaryConditionSpec) -> ElementBlockMatrix:
    """Boundary penalty E: symmetric negative-semidefinite, boundary blocks only.

    Zero everywhere unless the regime is weak Dirichlet with c11 > 0.
    """
    nt, m = mesh.n_elements, ref.n_nodes
    blocks = np.zeros((nt, m, m))
    if bc.regime is not Regime.DIRICHLET_WEAK:
        return ElementBlockMatrix(blocks)
    bf = _dirichlet_boundary_rows(mesh, bc)
    if not bf.size:
        return ElementBlockMatrix(blocks)
    eb, kb = bf[:, B_ELEM], bf[:, B_EDGE]
    fg = _face_geometry(mesh, ref, eb, kb)
    face_h = np.sum(fg.weights, axis=1)
    c11 = params.c11_values(ref.p, face_h)
    ls, _ = _trace_matrices(ref)
    sol_edges = np.stack(_edge_node_indices(ref.p))
    bmat = np.einsum("qa,fq,qb->fab", ls, fg.weights * c11[:, None], ls)
    for r in range(bf.shape[0]):
        idx = sol_edges[kb[r]]
        blocks[eb[r]][np.ix_(idx, idx)] -= bmat[r]
    return ElementBlockMatrix(blocks)


def boundary_dof_indices(mesh: QuadMesh, ref: ReferenceElement) -> np.ndarray:
    """Sorted DOF indices whose nodal point lies on the domain boundary."""
    sol_edges = np.stack(_edge_node_indices(ref.p))
    m = ref.n_nodes
    idx = [mesh.boundary_faces[r, B_ELEM] * m + sol_edges[mesh.boundary_faces[r, B_EDGE]]
           for r in range(mesh.boundary_faces.shape[0])]
    if not idx:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(idx))


# ---------------------------------------------------------------------------
# assembled system bundle
# ---------------------------------------------------------------------------

@dataclass
class DGSystem:
    """All assembled operators for one (mesh, degree, regime) triple."""

    mesh: QuadMesh
    ref: ReferenceElement
    bc: BoundaryConditionSpec
    params: LdgParameters
    mass: ElementBlockMatrix
    mass_inv: ElementBlockMatrix
    divergence: FaceCoupledOperator
    penalty: ElementBlockMatrix
    boundary_dofs: np.ndarray                 # empty unless strong Dirichlet
    mass_inv_masked: Optional[ElementBlockMatrix]  # C~ blocks (strong only)
    generator: sp.csr_matrix                  # L (or L~)
    m_one: np.ndarray                         # M @ 1
    total_mass: float                         # 1^T M 1 = domain area
    geom: _VolumeGeometry = field(repr=False)

    @property
    def n_dof(self) -> int:
        return self.mass.n_dof

    @property
    def regime(self) -> Regime:
        return self.bc.regime

    def interior_mask(self) -> np.ndarray:
        mask = np.ones(self.n_dof)
        mask[self.boundary_dofs] = 0.0
        return mask

    # dense exports (oracle-scale meshes only)
    def dense_mass(self) -> np.ndarray:
        return self.mass.to_dense()

    def dense_mass_inv(self) -> np.ndarray:
        return self.mass_inv.to_dense()

    def dense_divergence(self) -> np.ndarray:
        return self.divergence.to_dense()

    def dense_a(self) -> np.ndarray:
        """A = -D M^-1 D^T + E (independent of the strong-Dirichlet masking)."""
        d = self.dense_divergence()
        w2 = np.repeat(self.mass_inv.blocks, 2, axis=0)
        m = self.mass.block_size
        dw = d.copy().reshape(-1, 2 * self.mesh.n_elements, m)
        dw = np.einsum("kej,eij->kei", dw, w2)
        s = dw.reshape(d.shape) @ d.T
        return -s + self.penalty.to_dense()

    def dense_generator(self) -> np.ndarray:
        return self.generator.toarray()

    def target_covariance_dense(self) -> np.ndarray:
        """The equilibrium covariance the noise prescription aims at."""
        w = self.dense_mass_inv()
        if self.regime is Regime.DIRICHLET_STRONG:
            mask = self.interior_mask()
            return mask[:, None] * w * mask[None, :]
        return w


def _masked_inverse_mass(mass_inv: ElementBlockMatrix, boundary_dofs: np.ndarray) -> ElementBlockMatrix:
    blocks = mass_inv.blocks.copy()
    m = mass_inv.block_size
    for d in boundary_dofs:
        e, i = divmod(int(d), m)
        blocks[e, i, :] = 0.0
        blocks[e, :, i] = 0.0
    return ElementBlockMatrix(blocks)


def build_system(mesh: QuadMesh, p: int, bc: BoundaryConditionSpec,
                 params: Optional[LdgParameters] = None) -> DGSystem:
    """Assemble mass, divergence, penalty and the generator for one regime."""
    params = params or LdgParameters()
    ref = reference_element(p)
    _check_face_conformity(mesh, ref)
    geom = _volume_geometry(mesh, ref)
    mass = assemble_mass(mesh, ref, geom)
    mass_inv = ElementBlockMatrix(np.linalg.inv(mass.blocks))
    div = assemble_divergence(mesh, ref, params, bc, geom)
    penalty = assemble_penalty(mesh, ref, params, bc)

    w_sc = mass_inv.to_bsr()
    w_vec = mass_inv.vector_blocks().to_bsr()
    s = (div.matrix @ (w_vec @ div.matrix.T)).tocsr()

    if bc.regime is Regime.DIRICHLET_STRONG:
        bdofs = boundary_dof_indices(mesh, ref)
        if bdofs.size == 0:
            raise ConfigurationError("strong Dirichlet regime needs a nonempty boundary")
        masked = _masked_inverse_mass(mass_inv, bdofs)
        mask_diag = sp.diags(np.where(np.isin(np.arange(mass.n_dof), bdofs), 0.0, 1.0))
        gen = (masked.to_bsr() @ ((-s) @ mask_diag)).tocsr()
    else:
        bdofs = np.zeros(0, dtype=np.int64)
        masked = None
        a = -s
        if bc.regime is Regime.DIRICHLET_WEAK:
            a = a + penalty.to_bsr()
        gen = (w_sc @ a).tocsr()

    ones = np.ones(mass.n_dof)
    m_one = mass.apply(ones)
    return DGSystem(
        mesh=mesh, ref=ref, bc=bc, params=params,
        mass=mass, mass_inv=mass_inv, divergence=div, penalty=penalty,
        boundary_dofs=bdofs, mass_inv_masked=masked, generator=gen,
        m_one=m_one, total_mass=float(m_one @ ones), geom=geom,
    )


# ---------------------------------------------------------------------------
# operator application
# ---------------------------------------------------------------------------

def sigma_solve(u: np.ndarray, system: DGSystem) -> np.ndarray:
    """Element-local solve for sigma = M2^-1 (-D^T u) (the DG gradient of u)."""
    if u.shape[-1] != system.n_dof:
        raise ValueError(f"state length {u.shape[-1]} != n_dof {system.n_dof}")
    g = -(system.divergence.apply_transpose(u))
    return system.mass_inv.vector_blocks().apply(g)


def laplacian_apply(u: np.ndarray, system: DGSystem) -> np.ndarray:
    """L u composed from the block factors (reference path; run() uses csr)."""
    if u.shape[-1] != system.n_dof:
        raise ValueError(f"state length {u.shape[-1]} != n_dof {system.n_dof}")
    if system.regime is Regime.DIRICHLET_STRONG:
        v = u * system.interior_mask()
        sig = sigma_solve(v, system)
        return system.mass_inv_masked.apply(system.divergence.apply(sig))
    sig = sigma_solve(u, system)
    a = system.divergence.apply(sig)
    if system.regime is Regime.DIRICHLET_WEAK:
        a = a + system.penalty.apply(u)
    return system.mass_inv.apply(a)


def mean_zero_project(u: np.ndarray, system: DGSystem) -> np.ndarray:
    """Remove the M-weighted mean: u - (1^T M u / 1^T M 1) * 1.  Idempotent."""
    mean = (u @ system.m_one) / system.total_mass
    return u - (np.expand_dims(mean, -1) if u.ndim > 1 else mean)


# ---------------------------------------------------------------------------
# deterministic heat solve (operator validation path)
# ---------------------------------------------------------------------------

class TimeStepError(RuntimeError):
    """Euler iteration diverged (time step above the stability bound)."""


def project_forcing(system: DGSystem, f: Callable) -> np.ndarray:
    """Weak L2 projection of a forcing field onto the DG space: M^-1 (f, phi)."""
    vals = f(system.geom.x_q[..., 0], system.geom.x_q[..., 1])
    rhs = np.einsum("eq,qi->ei", system.geom.wdet * vals, system.ref.basis_at_quad)
    return system.mass_inv.apply(rhs.ravel())


def interpolate_nodal(system: DGSystem, f: Callable) -> np.ndarray:
    """Nodal interpolant of a field (values at the solution nodes)."""
    xn = system.geom.x_nodes
    return np.asarray(f(xn[..., 0], xn[..., 1])).ravel()


def l2_error(system: DGSystem, u: np.ndarray, exact: Callable) -> float:
    """Quadrature L2 norm of u_h - exact over the mesh."""
    uq = np.einsum("qi,ei->eq", system.ref.basis_at_quad,
                   u.reshape(system.mesh.n_elements, -1))
    diff = uq - exact(system.geom.x_q[..., 0], system.geom.x_q[..., 1])
    return float(np.sqrt(np.sum(system.geom.wdet * diff * diff)))


def solve_deterministic_heat(system: DGSystem, forcing: Optional[Callable],
                             dt: float, t_final: float,
                             u0: Optional[np.ndarray] = None) -> np.ndarray:
    """Explicit Euler integration of u' = L u + f to t_final (f deterministic).

    Homogeneous boundary data only.  Raises TimeStepError when the iterate
    diverges (CFL violation).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    for g in (system.bc.g_dirichlet, system.bc.g_neumann):
        if g is not None:
            raise NotImplementedError("inhomogeneous boundary data is not supported here")
    u = np.zeros(system.n_dof) if u0 is None else np.array(u0, dtype=float)
    ff = np.zeros(system.n_dof) if forcing is None else project_forcing(system, forcing)
    if system.regime.mean_zero:
        u = mean_zero_project(u, system)
        ff = mean_zero_project(ff, system)
    if system.regime is Regime.DIRICHLET_STRONG:
        u[system.boundary_dofs] = 0.0
    gen = system.generator
    limit = 1e8 * max(1.0, float(np.linalg.norm(u)) + float(np.linalg.norm(ff)))
    n_steps = int(round(t_final / dt))
    for step in range(n_steps):
        u = u + dt * (gen @ u + ff)
        if step % 256 == 0:
            nrm = float(np.linalg.norm(u))
            if not np.isfinite(nrm) or nrm > limit:
                raise TimeStepError(f"Euler iterate diverged at step {step}; reduce dt")
    if system.regime.mean_zero:
        u = mean_zero_project(u, system)
    return u
