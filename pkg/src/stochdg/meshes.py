"""Quadrilateral meshes: construction, periodic pairing, file format, validation.

Meshes are immutable after construction.  Every element carries an
isoparametric geometry map of degree ``p_geo`` sampled at tensor
Gauss-Lobatto nodes; straight-sided meshes are the ``p_geo = 1`` (bilinear)
case, so assembly has a single code path.

Face convention: local edge k of an element runs counterclockwise from
corner k to corner k+1.  Interior faces store a minus and a plus side,
chosen by a fixed upwind direction: the minus side is the one whose outward
chord normal has positive dot product with SWITCH_DIRECTION (ties fall back
to the lower element index; boundary faces take their unique element as
minus).  This deterministic, renumbering-stable rule realizes the one-sided
switch of the minimal-dissipation LDG fluxes.  A direction-consistent
switch matters: per-index switching leaves the one-sided gradient blind to
localized jump patterns at periodic seams, inflating the Laplacian null
space beyond the constants and starving those modes of noise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .refelement import (
    _edge_node_indices,
    gauss_lobatto_nodes,
    lagrange_eval_matrix,
    differentiation_matrix,
)

__all__ = [
    "BoundaryTag",
    "MeshError",
    "MeshFormatError",
    "QuadMesh",
    "cartesian_mesh",
    "perturbed_cartesian_mesh",
    "annulus_mesh",
    "apply_periodic",
    "load_mesh",
    "save_mesh",
]

PAIRING_TOL = 1e-8

# fixed generic upwind direction for the one-sided LDG switch
SWITCH_DIRECTION = np.array([np.cos(0.3717), np.sin(0.3717)])


class BoundaryTag(enum.IntEnum):
    DIRICHLET = 0
    NEUMANN = 1
    PERIODIC = 2  # only appears in mesh files; paired into interior faces on load


class MeshError(ValueError):
    """Invalid mesh geometry or topology."""


class MeshFormatError(MeshError):
    """Malformed mesh file."""


# interior_faces columns
F_EMINUS, F_EDGEMINUS, F_EPLUS, F_EDGEPLUS, F_FLIP, F_PERIODIC = range(6)
# boundary_faces columns
B_ELEM, B_EDGE, B_TAG = range(3)


@dataclass(frozen=True)
class QuadMesh:
    """2-D quadrilateral mesh with CCW elements and per-element geometry nodes.

    interior_faces rows: (elem_minus, edge_minus, elem_plus, edge_plus,
    flip, periodic).  ``flip`` is 1 when the plus side traverses the shared
    edge in the opposite parameter direction (always the case for conforming
    CCW neighbours; periodic pairs are matched explicitly).

    boundary_faces rows: (elem, edge, tag).
    """

    vertices: np.ndarray          # (nv, 2)
    elements: np.ndarray          # (nt, 4) CCW vertex indices
    p_geo: int
    geom_nodes: np.ndarray        # (nt, (p_geo+1)^2, 2)
    interior_faces: np.ndarray    # (nfi, 6) int
    boundary_faces: np.ndarray    # (nfb, 3) int

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def edge_geom_nodes(self, elem: int, edge: int) -> np.ndarray:
        """Geometry nodes along one local edge, in edge-parameter order."""
        idx = _edge_node_indices(self.p_geo)[edge]
        return self.geom_nodes[elem][idx]

    def element_faces(self) -> list[list[tuple]]:
        """Per-element view of all faces: entries (face_kind, face_row, side)."""
        out: list[list[tuple]] = [[] for _ in range(self.n_elements)]
        for r, f in enumerate(self.interior_faces):
            out[f[F_EMINUS]].append(("interior", r, "minus"))
            out[f[F_EPLUS]].append(("interior", r, "plus"))
        for r, f in enumerate(self.boundary_faces):
            out[f[B_ELEM]].append(("boundary", r, "minus"))
        return out

    def with_boundary_tag(self, tag: BoundaryTag) -> "QuadMesh":
        """Copy of the mesh with every boundary face retagged."""
        bf = self.boundary_faces.copy()
        if bf.size:
            bf[:, B_TAG] = int(tag)
        return QuadMesh(self.vertices, self.elements, self.p_geo,
                        self.geom_nodes, self.interior_faces, bf)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _bilinear_geom_nodes(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Geometry nodes for straight-sided elements (p_geo = 1, tensor order)."""
    v = vertices[elements]  # (nt, 4, 2) corners CCW
    # tensor order for p_geo=1: (xi,eta) = (-1,-1), (1,-1), (-1,1), (1,1)
    return v[:, [0, 1, 3, 2], :]


def _geom_jacobian_dets(mesh: QuadMesh, points_1d: np.ndarray) -> np.ndarray:
    """det of the geometry Jacobian at a tensor grid of reference points."""
    gnodes = gauss_lobatto_nodes(mesh.p_geo) if mesh.p_geo >= 1 else np.array([0.0])
    li = lagrange_eval_matrix(gnodes, points_1d)
    ld = li @ differentiation_matrix(gnodes)
    bxi = np.kron(li, ld)
    beta = np.kron(ld, li)
    x_xi = np.einsum("qg,egd->eqd", bxi, mesh.geom_nodes)
    x_eta = np.einsum("qg,egd->eqd", beta, mesh.geom_nodes)
    return x_xi[..., 0] * x_eta[..., 1] - x_xi[..., 1] * x_eta[..., 0]


def element_areas(mesh: QuadMesh) -> np.ndarray:
    """Per-element areas by Gauss-Legendre quadrature of det J."""
    nq = mesh.p_geo + 2
    qx, qw = np.polynomial.legendre.leggauss(nq)
    det = _geom_jacobian_dets(mesh, qx)
    w2 = np.kron(qw, qw)
    return det @ w2


def face_lengths(mesh: QuadMesh, faces: np.ndarray, side: str = "minus") -> np.ndarray:
    """Arclengths of the given face rows (minus-side geometry)."""
    if faces.size == 0:
        return np.zeros(0)
    elem_col, edge_col = (F_EMINUS, F_EDGEMINUS) if side == "minus" else (F_EPLUS, F_EDGEPLUS)
    if faces.shape[1] == 3:  # boundary rows
        elem_col, edge_col = B_ELEM, B_EDGE
    gnodes = gauss_lobatto_nodes(mesh.p_geo)
    qx, qw = np.polynomial.legendre.leggauss(mesh.p_geo + 2)
    ld = lagrange_eval_matrix(gnodes, qx) @ differentiation_matrix(gnodes)
    edge_idx = _edge_node_indices(mesh.p_geo)
    lengths = np.zeros(faces.shape[0])
    for r, f in enumerate(faces):
        ge = mesh.geom_nodes[f[elem_col]][edge_idx[f[edge_col]]]
        dx = ld @ ge  # (nq, 2) tangent
        lengths[r] = qw @ np.hypot(dx[:, 0], dx[:, 1])
    return lengths


def _check_orientation(mesh: QuadMesh) -> None:
    gnodes = gauss_lobatto_nodes(mesh.p_geo)
    det = _geom_jacobian_dets(mesh, gnodes)
    bad = np.where(np.min(det, axis=1) <= 0.0)[0]
    if bad.size:
        raise MeshError(
            f"nonpositive geometry Jacobian in element {bad[0]} "
            f"(min det J = {np.min(det[bad[0]]):.3e}); elements must be counterclockwise"
        )


def validate(mesh: QuadMesh) -> None:
    """Raise MeshError on any violated mesh invariant."""
    nt = mesh.n_elements
    if np.any(mesh.elements < 0) or np.any(mesh.elements >= mesh.n_vertices):
        raise MeshError("element vertex index out of range")
    for f in mesh.interior_faces:
        if not (0 <= f[F_EMINUS] < nt and 0 <= f[F_EPLUS] < nt):
            raise MeshError("interior face references missing element")
        n = _chord_normal(mesh.vertices, mesh.elements, int(f[F_EMINUS]), int(f[F_EDGEMINUS]))
        s = float(n @ SWITCH_DIRECTION)
        if s < -1e-12 * np.linalg.norm(n):
            raise MeshError("face orientation rule violated: minus normal opposes the switch direction")
    _check_orientation(mesh)
    per = mesh.interior_faces[mesh.interior_faces[:, F_PERIODIC] == 1] if mesh.interior_faces.size else np.zeros((0, 6), int)
    if per.size:
        lm = face_lengths(mesh, per, "minus")
        lp = face_lengths(mesh, per, "plus")
        if np.max(np.abs(lm - lp)) > 1e-10 * max(1.0, np.max(lm)):
            raise MeshError("periodic face pair lengths differ beyond 1e-10")


# ---------------------------------------------------------------------------
# face extraction
# ---------------------------------------------------------------------------

def _chord_normal(vertices: np.ndarray, elements: np.ndarray, elem: int, edge: int) -> np.ndarray:
    """Outward normal of the straight chord of one local edge (CCW element)."""
    a = vertices[elements[elem][edge]]
    b = vertices[elements[elem][(edge + 1) % 4]]
    t = b - a
    return np.array([t[1], -t[0]])


def _orient_face(vertices, elements, e1, k1, e2, k2) -> bool:
    """True when (e1, k1) is the minus side under the upwind switch rule."""
    n = _chord_normal(vertices, elements, e1, k1)
    s = float(n @ SWITCH_DIRECTION)
    if abs(s) > 1e-12 * np.linalg.norm(n):
        return s > 0.0
    return (e1, k1) <= (e2, k2)


def _build_faces(vertices: np.ndarray, elements: np.ndarray,
                 default_tag: BoundaryTag = BoundaryTag.NEUMANN):
    """Match element edges into interior and boundary faces via shared vertex pairs."""
    edge_map: dict[tuple, list[tuple]] = {}
    for e, quad in enumerate(elements):
        for k in range(4):
            a, b = int(quad[k]), int(quad[(k + 1) % 4])
            edge_map.setdefault((min(a, b), max(a, b)), []).append((e, k, a, b))
    interior, boundary = [], []
    for key, uses in sorted(edge_map.items()):
        if len(uses) == 1:
            e, k, _, _ = uses[0]
            boundary.append((e, k, int(default_tag)))
        elif len(uses) == 2:
            (e1, k1, a1, b1), (e2, k2, a2, b2) = uses
            if not _orient_face(vertices, elements, e1, k1, e2, k2):
                (e1, k1, a1, b1), (e2, k2, a2, b2) = (e2, k2, a2, b2), (e1, k1, a1, b1)
            flip = 1 if a1 == b2 and b1 == a2 else 0
            interior.append((e1, k1, e2, k2, flip, 0))
        else:
            raise MeshError(f"edge with vertices {key} shared by {len(uses)} elements")
    interior_arr = np.array(interior, dtype=np.int64).reshape(-1, 6)
    boundary_arr = np.array(boundary, dtype=np.int64).reshape(-1, 3)
    return interior_arr, boundary_arr


def _finish_mesh(vertices, elements, p_geo, geom_nodes, default_tag=BoundaryTag.NEUMANN) -> QuadMesh:
    interior, boundary = _build_faces(vertices, elements, default_tag)
    mesh = QuadMesh(
        vertices=np.ascontiguousarray(vertices, dtype=float),
        elements=np.ascontiguousarray(elements, dtype=np.int64),
        p_geo=int(p_geo),
        geom_nodes=np.ascontiguousarray(geom_nodes, dtype=float),
        interior_faces=interior,
        boundary_faces=boundary,
    )
    validate(mesh)
    return mesh


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def cartesian_mesh(nx: int, ny: int, domain=(-1.0, 1.0, -1.0, 1.0)) -> QuadMesh:
    """Uniform nx-by-ny mesh of the axis-aligned rectangle (x0, x1, y0, y1)."""
    if nx < 1 or ny < 1:
        raise ValueError(f"need nx, ny >= 1, got {nx}x{ny}")
    x0, x1, y0, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate rectangle {domain}")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    xv, yv = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([xv.ravel(), yv.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    elements = np.array(
        [[vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)]
         for j in range(ny) for i in range(nx)],
        dtype=np.int64,
    )
    return _finish_mesh(vertices, elements, 1, _bilinear_geom_nodes(vertices, elements))


def perturbed_cartesian_mesh(nx: int, ny: int, domain=(-1.0, 1.0, -1.0, 1.0),
                             amplitude: float = 0.22, seed: int = 0) -> QuadMesh:
    """Unstructured-looking mesh: Cartesian vertices jiggled deterministically.

    Interior vertices move freely; boundary vertices slide along their edge
    with mirrored displacements on opposite edges, so periodic pairing in
    either axis stays geometrically exact.  Corners are fixed.
    """
    base = cartesian_mesh(nx, ny, domain)
    x0, x1, y0, y1 = map(float, domain)
    hx, hy = (x1 - x0) / nx, (y1 - y0) / ny
    rng = np.random.default_rng(seed)
    disp = rng.uniform(-1.0, 1.0, size=(ny + 1, nx + 1, 2))
    disp[:, :, 0] *= amplitude * hx
    disp[:, :, 1] *= amplitude * hy
    # mirror tangential displacement on opposite edges, kill normal component
    disp[0, :, 1] = 0.0
    disp[-1, :, 1] = 0.0
    disp[-1, :, 0] = disp[0, :, 0]
    disp[:, 0, 0] = 0.0
    disp[:, -1, 0] = 0.0
    disp[:, -1, 1] = disp[:, 0, 1]
    for jj in (0, -1):
        for ii in (0, -1):
            disp[jj, ii] = 0.0
    vertices = base.vertices + disp.reshape(-1, 2)
    elements = base.elements
    return _finish_mesh(vertices, elements, 1, _bilinear_geom_nodes(vertices, elements))


def annulus_mesh(n_radial: int, n_angular: int, r_inner: float, r_outer: float,
                 warp_amplitude: float = 0.0, p_geo: int = 1) -> QuadMesh:
    """Curved mesh of a (possibly warped) annulus, closed in the angular direction.

    The geometry map sends (rho, theta) to radius rho*(1 + a*sin(2*theta)),
    sampled isoparametrically at degree p_geo per element, so shared edges
    carry identical geometry nodes.
    """
    if not (0.0 < r_inner < r_outer):
        raise ValueError(f"need 0 < r_inner < r_outer, got {r_inner}, {r_outer}")
    if n_angular < 3:
        raise ValueError("need n_angular >= 3 to close the annulus")
    if n_radial < 1 or p_geo < 1:
        raise ValueError("need n_radial >= 1 and p_geo >= 1")

    def warp(rho, theta):
        r = rho * (1.0 + warp_amplitude * np.sin(2.0 * theta))
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)

    rhos = np.linspace(r_inner, r_outer, n_radial + 1)
    thetas = 2.0 * np.pi * np.arange(n_angular) / n_angular

    def vid(ir, ia):
        return ir * n_angular + (ia % n_angular)

    vertices = warp(np.repeat(rhos, n_angular), np.tile(thetas, n_radial + 1))
    elements = np.array(
        [[vid(ir, ia), vid(ir + 1, ia), vid(ir + 1, ia + 1), vid(ir, ia + 1)]
         for ia in range(n_angular) for ir in range(n_radial)],
        dtype=np.int64,
    )
    g1 = gauss_lobatto_nodes(p_geo)
    # reference (xi, eta) -> (rho, theta) is affine per element
    gx, gy = np.meshgrid(g1, g1, indexing="xy")
    gx, gy = gx.ravel(), gy.ravel()
    geom = np.zeros((len(elements), (p_geo + 1) ** 2, 2))
    n = 0
    for ia in range(n_angular):
        th_a, th_b = 2.0 * np.pi * ia / n_angular, 2.0 * np.pi * (ia + 1) / n_angular
        for ir in range(n_radial):
            rho = 0.5 * ((rhos[ir + 1] - rhos[ir]) * gx + rhos[ir] + rhos[ir + 1])
            th = 0.5 * ((th_b - th_a) * gy + th_a + th_b)
            geom[n] = warp(rho, th)
            n += 1
    return _finish_mesh(vertices, elements, p_geo, geom)


# ---------------------------------------------------------------------------
# periodic pairing
# ---------------------------------------------------------------------------

def _pair_face_sets(mesh: QuadMesh, faces_a: list[int], faces_b: list[int],
                    translation: np.ndarray):
    """Match boundary face rows of set A onto set B under x -> x + translation.

    Returns (pairs, flips): for each A-face the matched B-row and whether the
    parameter directions oppose.
    """
    edge_idx = _edge_node_indices(mesh.p_geo)
    bf = mesh.boundary_faces

    def nodes_of(row):
        e, k = bf[row, B_ELEM], bf[row, B_EDGE]
        return mesh.geom_nodes[e][edge_idx[k]]

    scale = max(1.0, float(np.max(np.abs(mesh.vertices))))
    tol = PAIRING_TOL * scale
    b_nodes = [nodes_of(r) for r in faces_b]
    used = np.zeros(len(faces_b), dtype=bool)
    pairs, flips = [], []
    for ra in faces_a:
        na = nodes_of(ra) + translation
        hit = -1
        flip = 0
        for jb, nb in enumerate(b_nodes):
            if used[jb]:
                continue
            if np.max(np.abs(na - nb)) < tol:
                hit, flip = jb, 0
                break
            if np.max(np.abs(na - nb[::-1])) < tol:
                hit, flip = jb, 1
                break
        if hit < 0:
            e, k = bf[ra, B_ELEM], bf[ra, B_EDGE]
            mid = np.mean(nodes_of(ra), axis=0)
            raise MeshError(
                f"periodic pairing failed for boundary face (element {e}, edge {k}) "
                f"with midpoint ({mid[0]:.6g}, {mid[1]:.6g})"
            )
        used[hit] = True
        pairs.append(faces_b[hit])
        flips.append(flip)
    return pairs, flips


def apply_periodic(mesh: QuadMesh, axes: str = "xy") -> QuadMesh:
    """Turn matching opposite boundary faces into periodic interior faces.

    axes: any subset of "xy".  Faces must match under translation by the
    bounding-box extent to within 1e-8 (relative).
    """
    axes = axes.lower()
    if not axes or any(a not in "xy" for a in axes):
        raise ValueError(f"axes must be a nonempty subset of 'xy', got {axes!r}")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = hi - lo
    edge_idx = _edge_node_indices(mesh.p_geo)
    scale = max(1.0, float(np.max(np.abs(mesh.vertices))))

    keep = np.ones(mesh.boundary_faces.shape[0], dtype=bool)
    new_interior = [tuple(r) for r in mesh.interior_faces]
    bf = mesh.boundary_faces
    for ax in sorted(set(axes)):
        d = 0 if ax == "x" else 1
        low_rows, high_rows = [], []
        for r in range(bf.shape[0]):
            if not keep[r]:
                continue
            nodes = mesh.geom_nodes[bf[r, B_ELEM]][edge_idx[bf[r, B_EDGE]]]
            if np.max(np.abs(nodes[:, d] - lo[d])) < PAIRING_TOL * scale:
                low_rows.append(r)
            elif np.max(np.abs(nodes[:, d] - hi[d])) < PAIRING_TOL * scale:
                high_rows.append(r)
        if len(low_rows) != len(high_rows):
            raise MeshError(
                f"periodic pairing in {ax}: {len(low_rows)} faces on the low side, "
                f"{len(high_rows)} on the high side"
            )
        translation = np.zeros(2)
        translation[d] = extent[d]
        partners, flips = _pair_face_sets(mesh, low_rows, high_rows, translation)
        for rl, rh, fl in zip(low_rows, partners, flips):
            e1, k1 = int(bf[rl, B_ELEM]), int(bf[rl, B_EDGE])
            e2, k2 = int(bf[rh, B_ELEM]), int(bf[rh, B_EDGE])
            if not _orient_face(mesh.vertices, mesh.elements, e1, k1, e2, k2):
                (e1, k1), (e2, k2) = (e2, k2), (e1, k1)
            new_interior.append((e1, k1, e2, k2, fl, 1))
            keep[rl] = keep[rh] = False

    out = QuadMesh(
        vertices=mesh.vertices,
        elements=mesh.elements,
        p_geo=mesh.p_geo,
        geom_nodes=mesh.geom_nodes,
        interior_faces=np.array(sorted(new_interior), dtype=np.int64).reshape(-1, 6),
        boundary_faces=bf[keep].reshape(-1, 3),
    )
    validate(out)
    return out


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

_TAG_NAMES = {BoundaryTag.DIRICHLET: "dirichlet", BoundaryTag.NEUMANN: "neumann",
              BoundaryTag.PERIODIC: "periodic"}
_TAG_VALUES = {v: k for k, v in _TAG_NAMES.items()}


def save_mesh(path, mesh: QuadMesh) -> None:
    """Write the plain-text mesh format.

    Header ``quadmesh <nv> <nt> <p_geo>``; ``v x y`` per vertex; ``e i0 i1 i2
    i3 [geometry coords]`` per element (coords only when p_geo > 1); ``b elem
    edge tag`` per boundary face.  Periodic pairings are stored as periodic
    tags on both member faces and re-matched on load.
    """
    lines = [f"quadmesh {mesh.n_vertices} {mesh.n_elements} {mesh.p_geo}"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g}")
    for e in range(mesh.n_elements):
        parts = ["e"] + [str(int(i)) for i in mesh.elements[e]]
        if mesh.p_geo > 1:
            parts += [f"{c:.17g}" for c in mesh.geom_nodes[e].ravel()]
        lines.append(" ".join(parts))
    for f in mesh.boundary_faces:
        lines.append(f"b {f[B_ELEM]} {f[B_EDGE]} {_TAG_NAMES[BoundaryTag(f[B_TAG])]}")
    for f in mesh.interior_faces:
        if f[F_PERIODIC]:
            lines.append(f"b {f[F_EMINUS]} {f[F_EDGEMINUS]} periodic")
            lines.append(f"b {f[F_EPLUS]} {f[F_EDGEPLUS]} periodic")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path) -> QuadMesh:
    """Parse and validate a mesh file; errors carry the offending line number."""
    with open(path) as fh:
        raw = fh.read().splitlines()

    def fail(lineno, msg):
        raise MeshFormatError(f"{path}:{lineno + 1}: {msg}")

    if not raw or not raw[0].startswith("quadmesh"):
        fail(0, "missing 'quadmesh' header")
    head = raw[0].split()
    if len(head) != 4:
        fail(0, "header must be 'quadmesh <n_vertices> <n_elements> <p_geo>'")
    try:
        nv, nt, p_geo = int(head[1]), int(head[2]), int(head[3])
    except ValueError:
        fail(0, "non-integer header fields")
    mg = (p_geo + 1) ** 2
    vertices, elements, geoms, tags = [], [], [], []
    for ln, line in enumerate(raw[1:], start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "v":
                if len(parts) != 3:
                    fail(ln, "vertex line must be 'v x y'")
                vertices.append((float(parts[1]), float(parts[2])))
            elif parts[0] == "e":
                want = 5 if p_geo == 1 else 5 + 2 * mg
                if len(parts) != want:
                    fail(ln, f"element line needs {want - 1} fields, got {len(parts) - 1}")
                elements.append([int(x) for x in parts[1:5]])
                if p_geo > 1:
                    geoms.append(np.array([float(x) for x in parts[5:]]).reshape(mg, 2))
            elif parts[0] == "b":
                if len(parts) != 4 or parts[3] not in _TAG_VALUES:
                    fail(ln, "boundary line must be 'b elem edge dirichlet|neumann|periodic'")
                tags.append((int(parts[1]), int(parts[2]), _TAG_VALUES[parts[3]]))
            else:
                fail(ln, f"unknown record {parts[0]!r}")
        except ValueError as exc:
            fail(ln, f"parse error: {exc}")
    if len(vertices) != nv:
        raise MeshFormatError(f"{path}: header promises {nv} vertices, found {len(vertices)}")
    if len(elements) != nt:
        raise MeshFormatError(f"{path}: header promises {nt} elements, found {len(elements)}")
    vertices = np.array(vertices, dtype=float).reshape(nv, 2)
    elements = np.array(elements, dtype=np.int64).reshape(nt, 4)
    geom = np.stack(geoms) if p_geo > 1 else _bilinear_geom_nodes(vertices, elements)
    mesh = _finish_mesh(vertices, elements, p_geo, geom)

    periodic_faces = []
    for e, k, tag in tags:
        rows = np.where((mesh.boundary_faces[:, B_ELEM] == e) &
                        (mesh.boundary_faces[:, B_EDGE] == k))[0]
        if rows.size != 1:
            raise MeshFormatError(
                f"{path}: boundary tag names (element {e}, edge {k}), which is not a boundary face")
        if tag == BoundaryTag.PERIODIC:
            periodic_faces.append(int(rows[0]))
        else:
            mesh.boundary_faces[rows[0], B_TAG] = int(tag)
    if periodic_faces:
        mesh = _repair_periodic(mesh, periodic_faces)
    return mesh


def _repair_periodic(mesh: QuadMesh, rows: list[int]) -> QuadMesh:
    """Re-pair faces that were saved with the periodic tag."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    edge_idx = _edge_node_indices(mesh.p_geo)
    scale = max(1.0, float(np.max(np.abs(mesh.vertices))))
    axes = ""
    for d, ax in ((0, "x"), (1, "y")):
        for r in rows:
            nodes = mesh.geom_nodes[mesh.boundary_faces[r, B_ELEM]][edge_idx[mesh.boundary_faces[r, B_EDGE]]]
            at_lo = np.max(np.abs(nodes[:, d] - lo[d])) < PAIRING_TOL * scale
            at_hi = np.max(np.abs(nodes[:, d] - hi[d])) < PAIRING_TOL * scale
            if at_lo or at_hi:
                axes += ax
                break
    if not axes:
        raise MeshFormatError("periodic tags present but no matchable axis found")
    return apply_periodic(mesh, axes)
