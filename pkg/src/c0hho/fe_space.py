"""Polynomial bases, quadrature, L2 projections, and the hybrid DoF map.

Cell shape functions are Lagrange polynomials of degree p = k + 2 on the
principal lattice of the reference triangle (optionally Gauss-Lobatto
warped for p >= 5), evaluated through the affine map from the reference
element.  Face functions are L2-orthonormal Legendre polynomials in the
arclength parameterization fixed by the mesh.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.special import roots_jacobi

from .errors import InputError

MAX_QUAD_DEGREE = 60


# --------------------------------------------------------------- quadrature

@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int


@lru_cache(maxsize=None)
def cell_quadrature(degree):
    """Rule on the reference triangle (0,0)-(1,0)-(0,1), exact to `degree`.

    Collapsed Gauss-Legendre x Gauss-Jacobi product, so exactness holds for
    any requested degree up to MAX_QUAD_DEGREE.
    """
    if degree < 0:
        raise InputError("quadrature degree must be >= 0")
    if degree > MAX_QUAD_DEGREE:
        raise InputError(f"cell quadrature degree {degree} beyond supported maximum {MAX_QUAD_DEGREE}")
    n = degree // 2 + 1
    xu, wu = npleg.leggauss(n)
    xu = 0.5 * (xu + 1.0)
    wu = 0.5 * wu
    xv, wv = roots_jacobi(n, 1.0, 0.0)           # weight (1 - x) on [-1, 1]
    v = 0.5 * (xv + 1.0)
    wv = 0.25 * wv
    U, V = np.meshgrid(xu, v, indexing="ij")
    W = np.outer(wu, wv)
    pts = np.column_stack([(U * (1.0 - V)).ravel(), V.ravel()])
    return QuadratureRule(pts, W.ravel(), degree)


@lru_cache(maxsize=None)
def face_quadrature(degree):
    """Gauss-Legendre rule on [0, 1], exact to `degree`."""
    if degree < 0:
        raise InputError("quadrature degree must be >= 0")
    if degree > MAX_QUAD_DEGREE:
        raise InputError(f"face quadrature degree {degree} beyond supported maximum {MAX_QUAD_DEGREE}")
    x, w = npleg.leggauss(degree // 2 + 1)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w, degree)


# ---------------------------------------------------------- reference basis

def dim_poly(p):
    return (p + 1) * (p + 2) // 2


@lru_cache(maxsize=None)
def _exponents(p):
    return tuple((t - b, b) for t in range(p + 1) for b in range(t + 1))


def _legendre_tables(z, p, max_der):
    out = np.empty((max_der + 1, p + 1, len(z)))
    for a in range(p + 1):
        c = np.zeros(a + 1)
        c[a] = 1.0
        for d in range(max_der + 1):
            cd = npleg.legder(c, d) if d else c
            out[d, a] = npleg.legval(z, cd) * 2.0 ** d
    return out


def _eval_terms(p, pts, dx, dy):
    # tensor Legendre terms L_a(2x-1) L_b(2y-1), a + b <= p
    x = 2.0 * pts[:, 0] - 1.0
    y = 2.0 * pts[:, 1] - 1.0
    tx = _legendre_tables(x, p, dx)[dx]
    ty = _legendre_tables(y, p, dy)[dy]
    exps = _exponents(p)
    M = np.empty((len(exps), len(pts)))
    for t, (a, b) in enumerate(exps):
        M[t] = tx[a] * ty[b]
    return M


def lattice_nodes(p):
    """Principal lattice of order p, canonical ordering (j rows, i within)."""
    return np.array([(i / p, j / p) for j in range(p + 1) for i in range(p + 1 - j)])


@lru_cache(maxsize=None)
def node_tags(p):
    """Classify lattice nodes: ('v', vertex), ('e', local_edge, step 1..p-1),
    ('i', running interior index).  Local edges follow the CCW traversal
    (v0v1, v1v2, v2v0)."""
    tags = []
    n_int = 0
    for j in range(p + 1):
        for i in range(p + 1 - j):
            k = p - i - j
            if (i, j) == (0, 0):
                tags.append(("v", 0))
            elif (i, j) == (p, 0):
                tags.append(("v", 1))
            elif (i, j) == (0, p):
                tags.append(("v", 2))
            elif j == 0:
                tags.append(("e", 0, i))            # along v0 -> v1
            elif k == 0:
                tags.append(("e", 1, j))            # along v1 -> v2
            elif i == 0:
                tags.append(("e", 2, p - j))        # along v2 -> v0
            else:
                tags.append(("i", n_int))
                n_int += 1
    return tuple(tags)


def _gauss_lobatto(p):
    if p == 1:
        return np.array([-1.0, 1.0])
    c = np.zeros(p + 1)
    c[p] = 1.0
    interior = npleg.legroots(npleg.legder(c))
    return np.concatenate([[-1.0], np.sort(interior), [1.0]])


@lru_cache(maxsize=None)
def warped_nodes(p):
    """Gauss-Lobatto warped lattice ("Fekete-like"): edge nodes land on the
    1D Gauss-Lobatto points, interior nodes follow the blended warp."""
    eq = np.linspace(-1.0, 1.0, p + 1)
    gl = _gauss_lobatto(p)
    coef = np.polynomial.polynomial.polyfit(eq, gl - eq, p)

    def warp(r):
        # displacement scaled so it is applied in full on the edge itself
        num = np.polynomial.polynomial.polyval(r, coef)
        den = 1.0 - r ** 2
        out = np.zeros_like(num)
        mask = den > 1e-12
        out[mask] = num[mask] / den[mask]
        return out

    nodes = lattice_nodes(p)
    lam = np.column_stack([1.0 - nodes.sum(axis=1), nodes[:, 0], nodes[:, 1]])
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    out = nodes.copy()
    for a, b in ((0, 1), (1, 2), (2, 0)):
        la, lb = lam[:, a], lam[:, b]
        s = lb + la
        r = np.zeros(len(nodes))
        mask = s > 1e-14
        r[mask] = (lb[mask] - la[mask]) / s[mask]
        blend = np.zeros(len(nodes))
        blend[mask] = 4.0 * la[mask] * lb[mask] / s[mask] ** 2
        shift = 0.5 * blend * s * warp(r)
        out += shift[:, None] * (verts[b] - verts[a])[None, :]
    return out


@lru_cache(maxsize=None)
def _ref_basis_coeffs(p, node_set):
    if node_set == "lattice":
        nodes = lattice_nodes(p)
    elif node_set == "warped":
        nodes = warped_nodes(p)
    else:
        raise InputError(f"unknown node set '{node_set}'")
    V = _eval_terms(p, nodes, 0, 0)                # V[t, i] = m_t(node_i)
    ident = np.eye(V.shape[0])
    C = np.linalg.solve(V.T, ident).T              # C @ V = I
    C += (ident - C @ V) @ np.linalg.solve(V.T, ident).T
    return nodes, C


class RefBasis:
    """Lagrange basis on the reference triangle: values and x/y derivatives."""

    def __init__(self, p, node_set="lattice"):
        self.p = p
        self.node_set = node_set
        self.nodes, self._coeffs = _ref_basis_coeffs(p, node_set)
        self.n = dim_poly(p)

    def eval(self, pts, dx=0, dy=0):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self._coeffs @ _eval_terms(self.p, pts, dx, dy)

    def tables(self, pts):
        """Values, gradients, and Hessian components at reference points:
        (val, gx, gy, hxx, hxy, hyy), each (n_basis, n_pts)."""
        return (self.eval(pts), self.eval(pts, 1, 0), self.eval(pts, 0, 1),
                self.eval(pts, 2, 0), self.eval(pts, 1, 1), self.eval(pts, 0, 2))


@lru_cache(maxsize=None)
def ref_basis(p, node_set="lattice"):
    return RefBasis(p, node_set)


class CellBasis:
    """Degree-p Lagrange basis on a physical triangle via the affine map."""

    def __init__(self, vertices, p, node_set="lattice"):
        self.vertices = np.asarray(vertices, dtype=float)
        self.p = p
        self.ref = ref_basis(p, node_set)
        self.B = np.column_stack([self.vertices[1] - self.vertices[0],
                                  self.vertices[2] - self.vertices[0]])
        self.detB = float(self.B[0, 0] * self.B[1, 1] - self.B[0, 1] * self.B[1, 0])
        self.Binv = np.array([[self.B[1, 1], -self.B[0, 1]],
                              [-self.B[1, 0], self.B[0, 0]]]) / self.detB
        self.area = 0.5 * abs(self.detB)
        self.nodes = self.vertices[0] + self.ref.nodes @ self.B.T
        self.n = self.ref.n

    def to_reference(self, x):
        return (np.atleast_2d(x) - self.vertices[0]) @ self.Binv.T

    def map_reference(self, xhat):
        return self.vertices[0] + np.atleast_2d(xhat) @ self.B.T

    def values(self, x):
        return self.ref.eval(self.to_reference(x))

    def gradients(self, x):
        """(n_basis, n_pts, 2) physical gradients."""
        r = self.to_reference(x)
        gx = self.ref.eval(r, 1, 0)
        gy = self.ref.eval(r, 0, 1)
        return np.stack([gx, gy], axis=-1) @ self.Binv

    def hessians(self, x):
        """(n_basis, n_pts, 2, 2) physical Hessians."""
        r = self.to_reference(x)
        hxx = self.ref.eval(r, 2, 0)
        hxy = self.ref.eval(r, 1, 1)
        hyy = self.ref.eval(r, 0, 2)
        i = self.Binv
        pxx = i[0, 0] ** 2 * hxx + 2 * i[0, 0] * i[1, 0] * hxy + i[1, 0] ** 2 * hyy
        pxy = i[0, 0] * i[0, 1] * hxx + (i[0, 0] * i[1, 1] + i[1, 0] * i[0, 1]) * hxy \
            + i[1, 0] * i[1, 1] * hyy
        pyy = i[0, 1] ** 2 * hxx + 2 * i[0, 1] * i[1, 1] * hxy + i[1, 1] ** 2 * hyy
        H = np.empty(hxx.shape + (2, 2))
        H[..., 0, 0] = pxx
        H[..., 0, 1] = pxy
        H[..., 1, 0] = pxy
        H[..., 1, 1] = pyy
        return H


# ----------------------------------------------------------------- face basis

def face_basis_values(k, t, length):
    """Orthonormal Legendre basis on a face of given length, evaluated at
    arclength positions t in [0, length].  Shape (k + 1, len(t))."""
    t = np.asarray(t, dtype=float)
    z = 2.0 * t / length - 1.0
    out = np.empty((k + 1, len(t)))
    for m in range(k + 1):
        c = np.zeros(m + 1)
        c[m] = 1.0
        out[m] = npleg.legval(z, c) * np.sqrt((2 * m + 1) / length)
    return out


def l2_project_face(mesh, face_index, g, k, quad_degree=None):
    """Coefficients of the L2(F) projection of g onto the face basis.

    g is a callable of the arclength parameter t in [0, length], following
    the face's stored parameterization.
    """
    length = float(mesh.face_lengths[face_index])
    if quad_degree is None:
        quad_degree = 2 * k + 16
    rule = face_quadrature(quad_degree)
    t = rule.points * length
    w = rule.weights * length
    psi = face_basis_values(k, t, length)
    return psi @ (np.asarray(g(t), dtype=float) * w)


def lagrange_interpolate_cell(mesh, cell_index, v, p, node_set="lattice"):
    """Nodal coefficients of the degree-p Lagrange interpolant of v on a cell."""
    basis = CellBasis(mesh.cell_vertices(cell_index), p, node_set)
    return np.asarray(v(basis.nodes), dtype=float)


# -------------------------------------------------------------------- DoF map

class DofMap:
    """Global numbering of the continuous degree-(k+2) cell space and the
    broken degree-k face space.

    Cell block: shared vertex DoFs, then (p-1) DoFs per edge ordered from the
    lower- to the higher-indexed endpoint, then interior bubbles per cell.
    Face block: k+1 Legendre modes per face.  Local face data of a cell equal
    (n_F . n_K) times the global face coefficients.
    """

    def __init__(self, mesh, k, bc):
        if k < 0:
            raise InputError("polynomial degree k must be >= 0")
        if bc not in ("I", "II"):
            raise InputError(f"unknown boundary-condition type '{bc}' (use 'I' or 'II')")
        self.mesh = mesh
        self.k = k
        self.p = k + 2
        self.bc = bc
        p = self.p
        V, E, C = mesh.n_vertices, mesh.n_faces, mesh.n_cells
        self.n_edge_per = p - 1
        self.n_bubble_per = (p - 1) * (p - 2) // 2
        self.n_face_per = k + 1
        self.edge_offset = V
        self.bubble_offset = V + E * self.n_edge_per
        self.n_cell_dofs = self.bubble_offset + C * self.n_bubble_per
        self.face_offset = self.n_cell_dofs
        self.n_total = self.n_cell_dofs + E * self.n_face_per

        tags = node_tags(p)
        n_node = dim_poly(p)
        cells = mesh.cells
        self.cell_dofs = np.empty((C, n_node), dtype=np.int64)
        for c in range(C):
            tri = cells[c]
            row = self.cell_dofs[c]
            for ln, tag in enumerate(tags):
                if tag[0] == "v":
                    row[ln] = tri[tag[1]]
                elif tag[0] == "e":
                    le, s = tag[1], tag[2]
                    f = mesh.cell_faces[c, le]
                    a = tri[le]
                    b = tri[(le + 1) % 3]
                    pos = s if a < b else p - s
                    row[ln] = self.edge_offset + f * self.n_edge_per + pos - 1
                else:
                    row[ln] = self.bubble_offset + c * self.n_bubble_per + tag[1]

        self.cell_face_dofs = (self.face_offset
                               + mesh.cell_faces[:, :, None] * self.n_face_per
                               + np.arange(self.n_face_per)[None, None, :])
        self.cell_face_signs = mesh.cell_face_signs.copy()

        # full local gather: cell part (sign +1) then face part with signs
        self.gather_dofs = np.concatenate(
            [self.cell_dofs, self.cell_face_dofs.reshape(C, -1)], axis=1)
        self.gather_signs = np.concatenate(
            [np.ones((C, n_node)),
             np.repeat(self.cell_face_signs, self.n_face_per, axis=1)], axis=1)
        self.n_local = self.gather_dofs.shape[1]

        bubble_local = [i for i, t in enumerate(tags) if t[0] == "i"]
        self.bubble_local = np.array(bubble_local, dtype=np.int64)
        self.interface_local = np.array(
            [i for i in range(self.n_local) if i not in set(bubble_local)], dtype=np.int64)

        ess = np.zeros(self.n_total, dtype=bool)
        bf = np.nonzero(mesh.boundary_faces)[0]
        for f in bf:
            for vtx in mesh.face_endpoints[f]:
                ess[vtx] = True
            base = self.edge_offset + f * self.n_edge_per
            ess[base:base + self.n_edge_per] = True
            if bc == "I":
                fb = self.face_offset + f * self.n_face_per
                ess[fb:fb + self.n_face_per] = True
        self.essential_mask = ess
        self.free_idx = np.nonzero(~ess)[0]
        self.essential_idx = np.nonzero(ess)[0]
        self.boundary_face_idx = bf

    @property
    def n_bubbles(self):
        return self.mesh.n_cells * self.n_bubble_per

    def count_formula(self):
        p = self.p
        m = self.mesh
        return (m.n_vertices + (p - 1) * m.n_faces
                + ((p - 1) * (p - 2) // 2) * m.n_cells
                + (self.k + 1) * m.n_faces)


def build_dof_map(mesh, k, bc):
    return DofMap(mesh, k, bc)
