"""Per-cell hybrid operators: reduction, reconstruction, stabilization, stiffness.

A local hybrid vector stacks the cell coefficients (degree k+2 Lagrange)
and, per face, k+1 coefficients of the normal-derivative unknown in the
face's global Legendre basis, oriented by the cell's outward normal.
The reconstruction solves one dense saddle-point system per cell: the
Hessian Gram matrix constrained by the three first-order moment rows,
which fixes the affine kernel.
"""

from dataclasses import dataclass

import numpy as np

from . import fe_space as fes
from .errors import FactorizationError


@dataclass
class HybridLocal:
    """Cell coefficients plus facewise normal-derivative coefficients
    (already oriented by the cell's outward normal)."""
    cell: np.ndarray          # (dim P_{k+2},)
    faces: np.ndarray         # (3, k+1)

    @property
    def flat(self):
        return np.concatenate([self.cell, self.faces.ravel()])


@dataclass
class LocalOperator:
    reconstruction: np.ndarray    # R: (n_cell, n_local)
    stabilization: np.ndarray     # S: (n_local, n_local)
    mismatch: np.ndarray          # D: (3 (k+1), n_local), S = w D^T D
    hessian_gram: np.ndarray      # G: (n_cell, n_cell)
    stiffness: np.ndarray         # A = R^T G R + S
    weight: float                 # stabilization weight w_K
    k: int
    n_cell: int

    def stab_energies(self, loc):
        """Stabilization energy per row of loc, evaluated through the
        mismatch operator (no large-term cancellation)."""
        M = loc @ self.mismatch.T
        return self.weight * np.einsum("cm,cm->c", M, M)


class LocalCell:
    """Geometry + basis bundle for one triangle.

    Face parameterizations follow the mesh convention (start point, unit
    direction, outward normal of this cell); standalone cells default to
    the CCW traversal.
    """

    def __init__(self, vertices, k, face_params=None, node_set="lattice"):
        self.k = k
        self.p = k + 2
        self.vertices = np.asarray(vertices, dtype=float)
        self.basis = fes.CellBasis(self.vertices, self.p, node_set)
        e = [self.vertices[1] - self.vertices[0],
             self.vertices[2] - self.vertices[1],
             self.vertices[0] - self.vertices[2]]
        self.edge_lengths = np.array([np.hypot(*d) for d in e])
        self.diameter = float(self.edge_lengths.max())
        self.area = self.basis.area
        self.normals = np.array([(d[1], -d[0]) for d in e]) / self.edge_lengths[:, None]
        if face_params is None:
            face_params = [(self.vertices[le], e[le] / self.edge_lengths[le],
                            self.edge_lengths[le]) for le in range(3)]
        self.face_starts = np.array([fp[0] for fp in face_params])
        self.face_dirs = np.array([fp[1] for fp in face_params])
        self.face_lengths = np.array([fp[2] for fp in face_params])

    @classmethod
    def from_mesh(cls, mesh, c, k, node_set="lattice"):
        params = []
        for le in range(3):
            f = mesh.cell_faces[c, le]
            params.append((mesh.face_starts[f], mesh.face_tangents[f],
                           float(mesh.face_lengths[f])))
        return cls(mesh.cell_vertices(c), k, params, node_set)

    def face_points(self, le, t):
        return self.face_starts[le][None, :] + np.outer(t, self.face_dirs[le])

    @property
    def n_cell(self):
        return self.basis.n

    @property
    def n_local(self):
        return self.basis.n + 3 * (self.k + 1)


def _face_blocks(lc, quad_degree):
    """Per-face matrices used by reconstruction and stabilization:
    P[f][m,i] = (psi_m, dn phi_i)_F   (projection of normal derivatives),
    Q[f][m,j] = (psi_m, dnn phi_j)_F,
    W[i,j]    = sum_f (dn phi_i, dnn phi_j)_F.
    """
    rule = fes.face_quadrature(quad_degree)
    nb = lc.n_cell
    P, Q = [], []
    W = np.zeros((nb, nb))
    for le in range(3):
        L = lc.face_lengths[le]
        t = rule.points * L
        w = rule.weights * L
        x = lc.face_points(le, t)
        n = lc.normals[le]
        dn = lc.basis.gradients(x) @ n
        hess = lc.basis.hessians(x)
        dnn = np.einsum("a,ipab,b->ip", n, hess, n)
        psi = fes.face_basis_values(lc.k, t, L)
        P.append(np.einsum("mp,ip,p->mi", psi, dn, w))
        Q.append(np.einsum("mp,ip,p->mi", psi, dnn, w))
        W += np.einsum("ip,jp,p->ij", dn, dnn, w)
    return P, Q, W


def hessian_gram(lc, quad_degree=None):
    if quad_degree is None:
        quad_degree = 2 * lc.p
    rule = fes.cell_quadrature(quad_degree)
    x = lc.basis.map_reference(rule.points)
    w = rule.weights * abs(lc.basis.detB)
    H = lc.basis.hessians(x)
    return np.einsum("ipab,jpab,p->ij", H, H, w, optimize=True)


def _moment_rows(lc, quad_degree):
    """Scaled first-order moment rows (1, (x-xc)/h, (y-yc)/h) / area."""
    rule = fes.cell_quadrature(quad_degree)
    x = lc.basis.map_reference(rule.points)
    w = rule.weights * abs(lc.basis.detB)
    vals = lc.basis.values(x)
    xc = lc.vertices.mean(axis=0)
    xi = np.stack([np.ones(len(x)),
                   (x[:, 0] - xc[0]) / lc.diameter,
                   (x[:, 1] - xc[1]) / lc.diameter])
    return np.einsum("mp,ip,p->mi", xi, vals, w) / lc.area


def build_reconstruction(lc, gram=None):
    """Matrix mapping local hybrid coefficients to the reconstructed
    degree-(k+2) polynomial.  The Hessian form annihilates affine test
    functions, so testing against the full space plus the three moment
    constraints reproduces the defining equations exactly."""
    qd = 2 * lc.p
    G = hessian_gram(lc, qd) if gram is None else gram
    M1 = _moment_rows(lc, qd)
    _, Q, W = _face_blocks(lc, qd)
    nb = lc.n_cell
    kk = lc.k + 1
    rhs = np.zeros((nb + 3, lc.n_local))
    rhs[:nb, :nb] = G - W.T
    for le in range(3):
        rhs[:nb, nb + le * kk:nb + (le + 1) * kk] = Q[le].T
    rhs[nb:, :nb] = M1
    KKT = np.zeros((nb + 3, nb + 3))
    KKT[:nb, :nb] = G
    KKT[:nb, nb:] = M1.T
    KKT[nb:, :nb] = M1
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"singular local reconstruction system (cell diameter {lc.diameter:.3e}): {exc}"
        ) from None
    return sol[:nb]


def projected_mismatch(lc):
    """Rows of Pi(gamma - dn v) per face mode: D (3 (k+1), n_local)."""
    P, _, _ = _face_blocks(lc, 2 * lc.p)
    nb = lc.n_cell
    kk = lc.k + 1
    D = np.zeros((3 * kk, lc.n_local))
    for le in range(3):
        D[le * kk:(le + 1) * kk, :nb] = -P[le]
        D[le * kk:(le + 1) * kk, nb + le * kk:nb + (le + 1) * kk] = np.eye(kk)
    return D


def build_stabilization(lc, weight_mode="weighted_k"):
    """S = w_K sum_F (Pi(gamma - dn v), Pi(chi - dn w))_F with the projector
    applied symmetrically (identical on the discrete space, exactly
    symmetric in floating point)."""
    D = projected_mismatch(lc)
    return stabilization_weight(lc, weight_mode) * (D.T @ D)


def stabilization_weight(lc, weight_mode):
    if weight_mode == "paper_h_inv":
        return 1.0 / lc.diameter
    if weight_mode == "weighted_k":
        return (lc.k + 1) ** 2 / lc.diameter
    raise ValueError(f"unknown weight mode '{weight_mode}'")


def local_stiffness(lc, weight_mode="weighted_k"):
    G = hessian_gram(lc)
    R = build_reconstruction(lc, gram=G)
    w_K = stabilization_weight(lc, weight_mode)
    D = projected_mismatch(lc)
    S = w_K * (D.T @ D)
    A = R.T @ G @ R + S
    A = 0.5 * (A + A.T)
    return LocalOperator(reconstruction=R, stabilization=S, mismatch=D,
                         hessian_gram=G, stiffness=A, weight=w_K,
                         k=lc.k, n_cell=lc.n_cell)


def reduce_cell(lc, v, grad_v, quad_degree=None):
    """HHO reduction: Lagrange interpolant of v plus facewise L2 projection
    of the outward normal derivative."""
    if quad_degree is None:
        quad_degree = 2 * lc.p + 8
    cell = np.asarray(v(lc.basis.nodes), dtype=float)
    rule = fes.face_quadrature(quad_degree)
    faces = np.empty((3, lc.k + 1))
    for le in range(3):
        L = lc.face_lengths[le]
        t = rule.points * L
        w = rule.weights * L
        x = lc.face_points(le, t)
        dn = np.asarray(grad_v(x), dtype=float) @ lc.normals[le]
        psi = fes.face_basis_values(lc.k, t, L)
        faces[le] = psi @ (dn * w)
    return HybridLocal(cell=cell, faces=faces)


def seminorm_gram(lc):
    """Gram matrix of the local energy seminorm: Hessian part on the cell
    block plus h^-1 times the unprojected face mismatch (gamma - dn v)."""
    G = hessian_gram(lc)
    N = np.zeros((lc.n_local, lc.n_local))
    nb = lc.n_cell
    N[:nb, :nb] = G
    rule = fes.face_quadrature(2 * lc.p)
    kk = lc.k + 1
    for le in range(3):
        L = lc.face_lengths[le]
        t = rule.points * L
        w = rule.weights * L
        x = lc.face_points(le, t)
        dn = lc.basis.gradients(x) @ lc.normals[le]
        psi = fes.face_basis_values(lc.k, t, L)
        mism = np.zeros((lc.n_local, len(t)))
        mism[:nb] = -dn
        mism[nb + le * kk:nb + (le + 1) * kk] = psi
        N += np.einsum("ip,jp,p->ij", mism, mism, w) / lc.diameter
    return 0.5 * (N + N.T)
