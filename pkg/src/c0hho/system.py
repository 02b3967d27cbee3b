"""Global assembly, essential-BC lifting, static condensation, direct solve.

The global matrix is gathered cellwise from per-shape-group dense local
operators; face coefficients enter with the sign n_F . n_K.  Essential
DoFs are eliminated by row/column removal with a right-hand-side lift,
which keeps the reduced matrix symmetric positive definite.  Bubble DoFs
couple only inside their own cell, so condensation happens on the dense
group operators before gathering.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fe_space as fes
from . import hho_local as hl
from .errors import FactorizationError, InputError


@dataclass
class LoadSpec:
    """Problem data: volume density, optional line source, boundary data.

    f_reg maps (N, 2) points to values; it may be piecewise across the
    vertical line x = interface_x (cells straddling the line are then
    integrated with split quadrature).  g0 is the essential trace u on the
    boundary; g1 (type I) and g2 (type II) map (points, normals) to the
    prescribed normal derivative and normal-normal second derivative.
    """

    f_reg: object = None
    interface_x: float = None
    line_segment: tuple = None          # ((x0, y0), (x1, y1))
    line_density: object = None         # callable on (N, 2) points
    g0: object = None
    g1: object = None                   # callable(points, normals), type I only
    g2: object = None                   # callable(points, normals), type II only

    def validate(self, bc):
        if bc == "I" and self.g2 is not None:
            raise InputError("type I boundary conditions cannot take natural data g2")
        if bc == "II" and self.g1 is not None:
            raise InputError("type II boundary conditions cannot take essential data g1")
        if (self.line_segment is None) != (self.line_density is None):
            raise InputError("line source needs both a segment and a density")


@dataclass
class HybridVector:
    values: np.ndarray
    dofmap: object

    @property
    def cell_part(self):
        return self.values[:self.dofmap.n_cell_dofs]


@dataclass
class SolveReport:
    n: int = 0
    assembly_s: float = 0.0
    factor_s: float = 0.0
    solve_s: float = 0.0
    factor_nnz: int = 0
    residual: float = 0.0


@dataclass
class CondEstimate:
    kappa: float
    lambda_max: float
    lambda_min: float
    iterations_max: int
    iterations_min: int
    converged: bool


class LinearSystem:
    def __init__(self, mesh, dofmap, groups, A_full, b_full, x_ess, load,
                 weight_mode, node_set, assembly_s):
        self.mesh = mesh
        self.dofmap = dofmap
        self.groups = groups          # list of (LocalOperator, cell indices)
        self.A_full = A_full
        self.b_full = b_full
        self.x_ess = x_ess
        self.load = load
        self.weight_mode = weight_mode
        self.node_set = node_set
        self.assembly_s = assembly_s
        free = dofmap.free_idx
        ess = dofmap.essential_idx
        self.A = A_full[free][:, free].tocsc()
        self.b = b_full[free] - A_full[free][:, ess] @ x_ess[ess]

    @property
    def n_free(self):
        return len(self.dofmap.free_idx)

    def full_vector(self, x_free):
        x = self.x_ess.copy()
        x[self.dofmap.free_idx] = x_free
        return x

    def free_values(self, x_full):
        return x_full[self.dofmap.free_idx]


class CondensedSystem:
    """Schur complement over non-bubble DoFs with per-group recovery data."""

    def __init__(self, parent):
        self.parent = parent
        dm = parent.dofmap
        n = dm.n_total
        bubble_mask = np.zeros(n, dtype=bool)
        if dm.n_bubble_per > 0:
            bubble_mask[dm.bubble_offset:dm.bubble_offset + dm.n_bubbles] = True
        self.keep = np.nonzero(~bubble_mask)[0]
        new_id = np.full(n, -1, dtype=np.int64)
        new_id[self.keep] = np.arange(len(self.keep))
        self.new_id = new_id
        self.recovery = []

        if dm.n_bubble_per == 0:
            self.A_full = parent.A_full
            self.b_full = parent.b_full
        else:
            Ib = dm.bubble_local
            Ii = dm.interface_local
            b_full = parent.b_full
            b_cond = b_full[self.keep].copy()
            rows, cols, vals = [], [], []
            for op, cells in parent.groups:
                A = op.stiffness
                A_bb = A[np.ix_(Ib, Ib)]
                A_bi = A[np.ix_(Ib, Ii)]
                A_bb_inv = np.linalg.inv(A_bb)
                A_t = A[np.ix_(Ii, Ii)] - A_bi.T @ A_bb_inv @ A_bi
                gd = new_id[dm.gather_dofs[cells][:, Ii]]
                gs = dm.gather_signs[cells][:, Ii]
                m, nl = gd.shape
                rows.append(np.repeat(gd, nl, axis=1).ravel())
                cols.append(np.tile(gd, (1, nl)).ravel())
                vals.append((gs[:, :, None] * gs[:, None, :] * A_t[None]).ravel())
                # fold the bubble load into the interface right-hand side
                bd = dm.gather_dofs[cells][:, Ib]
                y = b_full[bd] @ A_bb_inv.T
                np.subtract.at(b_cond, gd, gs * (y @ A_bi))
                self.recovery.append((A_bb_inv, A_bi, cells))
            n_keep = len(self.keep)
            self.A_full = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n_keep, n_keep)).tocsr()
            self.b_full = b_cond

        ess_keep = dm.essential_mask[self.keep]
        self.free_pos = np.nonzero(~ess_keep)[0]
        ess_pos = np.nonzero(ess_keep)[0]
        x_ess_keep = parent.x_ess[self.keep]
        self.A = self.A_full[self.free_pos][:, self.free_pos].tocsc()
        self.b = self.b_full[self.free_pos] - \
            self.A_full[self.free_pos][:, ess_pos] @ x_ess_keep[ess_pos]
        self._x_ess_keep = x_ess_keep
        self._ess_pos = ess_pos

    @property
    def n_free(self):
        return len(self.free_pos)

    def full_vector(self, x_free_cond):
        parent = self.parent
        dm = parent.dofmap
        x_keep = self._x_ess_keep.copy()
        x_keep[self.free_pos] = x_free_cond
        x = np.zeros(dm.n_total)
        x[self.keep] = x_keep
        if dm.n_bubble_per > 0:
            Ib = dm.bubble_local
            Ii = dm.interface_local
            for (A_bb_inv, A_bi, cells), (op, _) in zip(self.recovery, parent.groups):
                gd_i = dm.gather_dofs[cells][:, Ii]
                gs_i = dm.gather_signs[cells][:, Ii]
                bd = dm.gather_dofs[cells][:, Ib]
                x_i = x[gd_i] * gs_i
                x[bd.ravel()] = ((parent.b_full[bd] - x_i @ A_bi.T) @ A_bb_inv.T).ravel()
                del op
        return x


# ------------------------------------------------------------------ assembly

def assemble(mesh, k, bc, load, weight_mode="weighted_k", node_set="lattice",
             q_rhs=None):
    """Assemble the hybrid system a_h = sum_K a_K with the load functional
    (volume density, optional line source, type-II natural boundary term)
    and eliminate essential DoFs by lifting."""
    t0 = time.perf_counter()
    load.validate(bc)
    dm = fes.build_dof_map(mesh, k, bc)
    p = dm.p
    if q_rhs is None:
        q_rhs = p + 4

    groups = []
    for rep, cells in mesh.shape_groups():
        lc = hl.LocalCell.from_mesh(mesh, rep, k, node_set)
        groups.append((hl.local_stiffness(lc, weight_mode), cells))

    n_loc = dm.n_local
    rows, cols, vals = [], [], []
    for op, cells in groups:
        gd = dm.gather_dofs[cells]
        gs = dm.gather_signs[cells]
        rows.append(np.repeat(gd, n_loc, axis=1).ravel())
        cols.append(np.tile(gd, (1, n_loc)).ravel())
        vals.append((gs[:, :, None] * gs[:, None, :] * op.stiffness[None]).ravel())
    A_full = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(dm.n_total, dm.n_total)).tocsr()

    b_full = np.zeros(dm.n_total)
    if load.f_reg is not None:
        _add_volume_load(mesh, dm, groups, load, p + q_rhs, node_set, b_full)
    if load.line_segment is not None:
        _add_line_load(mesh, dm, load, p + q_rhs, node_set, b_full)
    if bc == "II" and load.g2 is not None:
        _add_natural_term(mesh, dm, load, b_full)

    x_ess = _essential_values(mesh, dm, load)
    return LinearSystem(mesh, dm, groups, A_full, b_full, x_ess, load,
                        weight_mode, node_set, time.perf_counter() - t0)


def _straddling_cells(mesh, x0):
    v = mesh.vertices
    t = mesh.cells
    xs = v[t, 0]
    return np.nonzero((xs.min(axis=1) < x0 - 1e-14) & (xs.max(axis=1) > x0 + 1e-14))[0]


def _add_volume_load(mesh, dm, groups, load, quad_degree, node_set, b_full):
    rule = fes.cell_quadrature(quad_degree)
    basis = fes.ref_basis(dm.p, node_set)
    phi = basis.eval(rule.points)
    straddle = set()
    if load.interface_x is not None:
        straddle = set(_straddling_cells(mesh, load.interface_x).tolist())
    for op, cells in groups:
        cells = np.array([c for c in cells if c not in straddle])
        if len(cells) == 0:
            continue
        v0 = mesh.vertices[mesh.cells[cells, 0]]
        rep = cells[0]
        cb = fes.CellBasis(mesh.cell_vertices(rep), dm.p, node_set)
        X = v0[:, None, :] + (rule.points @ cb.B.T)[None, :, :]
        w = rule.weights * abs(cb.detB)
        fv = np.asarray(load.f_reg(X.reshape(-1, 2)), dtype=float).reshape(len(cells), -1)
        np.add.at(b_full, dm.cell_dofs[cells], (fv * w[None, :]) @ phi.T)
        del op
    # cells crossing the interface: integrate branchwise on sub-triangles
    for c in sorted(straddle):
        cb = fes.CellBasis(mesh.cell_vertices(c), dm.p, node_set)
        acc = np.zeros(cb.n)
        for tri, _side in mesh.split_cell_by_vertical_line(c, load.interface_x):
            sub = fes.CellBasis(tri, 1)
            X = sub.map_reference(rule.points)
            w = rule.weights * abs(sub.detB)
            acc += cb.values(X) @ (np.asarray(load.f_reg(X), dtype=float) * w)
        b_full[dm.cell_dofs[c]] += acc


def _add_line_load(mesh, dm, load, quad_degree, node_set, b_full):
    rule = fes.face_quadrature(quad_degree)
    p0, p1 = load.line_segment
    for c, (a, b) in mesh.clip_segment_to_cells(p0, p1):
        seg = np.asarray(b) - np.asarray(a)
        length = float(np.hypot(*seg))
        X = np.asarray(a)[None, :] + np.outer(rule.points, seg)
        w = rule.weights * length
        cb = fes.CellBasis(mesh.cell_vertices(c), dm.p, node_set)
        g = np.asarray(load.line_density(X), dtype=float)
        b_full[dm.cell_dofs[c]] += cb.values(X) @ (g * w)


def _add_natural_term(mesh, dm, load, b_full):
    rule = fes.face_quadrature(2 * dm.k + 16)
    for f in dm.boundary_face_idx:
        L = float(mesh.face_lengths[f])
        t = rule.points * L
        w = rule.weights * L
        X = mesh.face_starts[f][None, :] + np.outer(t, mesh.face_tangents[f])
        normals = np.tile(mesh.face_normals[f], (len(t), 1))
        g = np.asarray(load.g2(X, normals), dtype=float)
        psi = fes.face_basis_values(dm.k, t, L)
        base = dm.face_offset + f * dm.n_face_per
        b_full[base:base + dm.n_face_per] += psi @ (g * w)


def trace_values(mesh, dm, g0, out):
    """Fill boundary cell-trace DoFs (vertices + edge nodes) with g0 values."""
    p = dm.p
    done_v = set()
    for f in dm.boundary_face_idx:
        a, b = mesh.face_endpoints[f]
        lo, hi = (a, b) if a < b else (b, a)
        for vtx in (lo, hi):
            if vtx not in done_v:
                out[vtx] = float(np.asarray(g0(mesh.vertices[vtx][None, :]))[0])
                done_v.add(vtx)
        if dm.n_edge_per > 0:
            tpos = (np.arange(1, p) / p)[:, None]
            pts = (1 - tpos) * mesh.vertices[lo] + tpos * mesh.vertices[hi]
            base = dm.edge_offset + f * dm.n_edge_per
            out[base:base + dm.n_edge_per] = np.asarray(g0(pts), dtype=float)


def _essential_values(mesh, dm, load):
    x = np.zeros(dm.n_total)
    if load.g0 is not None:
        trace_values(mesh, dm, load.g0, x)
    if dm.bc == "I" and load.g1 is not None:
        rule = fes.face_quadrature(2 * dm.k + 16)
        for f in dm.boundary_face_idx:
            L = float(mesh.face_lengths[f])
            t = rule.points * L
            w = rule.weights * L
            X = mesh.face_starts[f][None, :] + np.outer(t, mesh.face_tangents[f])
            normals = np.tile(mesh.face_normals[f], (len(t), 1))
            g = np.asarray(load.g1(X, normals), dtype=float)
            psi = fes.face_basis_values(dm.k, t, L)
            base = dm.face_offset + f * dm.n_face_per
            x[base:base + dm.n_face_per] = psi @ (g * w)
    return x


# -------------------------------------------------------------- field helpers

def interpolate_hybrid(mesh, dofmap, u, grad_u, node_set="lattice"):
    """Global reduction of a smooth function: Lagrange interpolant on cells,
    facewise projection of n_F . grad u on faces."""
    x = np.zeros(dofmap.n_total)
    for c in range(mesh.n_cells):
        cb = fes.CellBasis(mesh.cell_vertices(c), dofmap.p, node_set)
        x[dofmap.cell_dofs[c]] = np.asarray(u(cb.nodes), dtype=float)
    rule = fes.face_quadrature(2 * dofmap.k + 16)
    for f in range(mesh.n_faces):
        L = float(mesh.face_lengths[f])
        t = rule.points * L
        w = rule.weights * L
        X = mesh.face_starts[f][None, :] + np.outer(t, mesh.face_tangents[f])
        dn = np.einsum("pd,d->p", np.asarray(grad_u(X), dtype=float),
                       mesh.face_normals[f])
        psi = fes.face_basis_values(dofmap.k, t, L)
        base = dofmap.face_offset + f * dofmap.n_face_per
        x[base:base + dofmap.n_face_per] = psi @ (dn * w)
    return x


def local_vectors(sys, x_full, cells):
    return x_full[sys.dofmap.gather_dofs[cells]] * sys.dofmap.gather_signs[cells]


def reconstruct_field(sys, x_full):
    """Per-cell coefficients of the reconstructed degree-(k+2) polynomial."""
    out = np.empty((sys.mesh.n_cells, sys.groups[0][0].n_cell))
    for op, cells in sys.groups:
        out[cells] = local_vectors(sys, x_full, cells) @ op.reconstruction.T
    return out


def cell_field(sys, x_full):
    """Per-cell coefficients of the cell unknown itself (variant norms)."""
    return x_full[sys.dofmap.cell_dofs]


def stabilization_energy(sys, x_full):
    total = 0.0
    for op, cells in sys.groups:
        loc = local_vectors(sys, x_full, cells)
        total += op.stab_energies(loc).sum()
    return float(total)


def bilinear_energy(sys, x_full):
    total = 0.0
    for op, cells in sys.groups:
        loc = local_vectors(sys, x_full, cells)
        total += np.einsum("ci,ij,cj->", loc, op.stiffness, loc)
    return float(total)


# --------------------------------------------------------------------- solve

def factorize(A):
    """Symmetric-mode SuperLU with zero pivot threshold: an LDL^T-like
    factorization whose pivots must be positive for an SPD matrix."""
    lu = spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A",
                   diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    d = lu.U.diagonal()
    bad = np.nonzero(d <= 0)[0]
    if len(bad):
        raise FactorizationError(
            f"non-positive pivot at elimination index {bad[0]} "
            f"(value {d[bad[0]]:.3e}): matrix is not positive definite",
            pivot_index=int(bad[0]))
    return lu


def solve(obj, report=None):
    """Direct solve of an assembled system (full, condensed, or IPDG);
    returns the full coefficient vector and a report with timings and the
    relative residual measured on the uncondensed free system."""
    parent = getattr(obj, "parent", obj)
    rep = report or SolveReport()
    rep.n = obj.n_free
    rep.assembly_s = parent.assembly_s
    t0 = time.perf_counter()
    lu = factorize(obj.A)
    rep.factor_s = time.perf_counter() - t0
    rep.factor_nnz = int(lu.L.nnz + lu.U.nnz)
    t0 = time.perf_counter()
    x_free = lu.solve(obj.b)
    x_full = obj.full_vector(x_free)
    rep.solve_s = time.perf_counter() - t0
    r = parent.A @ parent.free_values(x_full) - parent.b
    scale = np.linalg.norm(parent.b)
    rep.residual = float(np.linalg.norm(r) / (scale if scale > 0 else 1.0))
    return HybridVector(x_full, parent.dofmap), rep


def estimate_condition(A, tol=1e-2, max_iter=500, seed=0, lu=None):
    """2-norm condition estimate: power iteration for the largest eigenvalue,
    inverse iteration through the factorization for the smallest."""
    A = A.tocsc()
    if lu is None:
        lu = factorize(A)
    rng = np.random.default_rng(seed)
    n = A.shape[0]

    def extreme(invert):
        # Rayleigh-quotient iteration target with an eigen-residual stopping
        # test: for symmetric A, |lambda_est - lambda| <= ||A x - lambda x||.
        x = rng.standard_normal(n)
        x /= np.linalg.norm(x)
        lam = 0.0
        for it in range(1, max_iter + 1):
            y = lu.solve(x) if invert else A @ x
            ny = np.linalg.norm(y)
            if ny == 0.0:
                return 0.0, it, True
            x_new = y / ny
            Ax = A @ x_new
            lam = float(x_new @ Ax)
            resid = np.linalg.norm(Ax - lam * x_new)
            if resid <= tol * abs(lam):
                return lam, it, True
            x = x_new
        return lam, max_iter, False

    lmax, it_max, ok_max = extreme(invert=False)
    lmin, it_min, ok_min = extreme(invert=True)
    kappa = lmax / lmin if lmin > 0 else np.inf
    return CondEstimate(kappa=float(kappa), lambda_max=float(lmax),
                        lambda_min=float(lmin), iterations_max=it_max,
                        iterations_min=it_min, converged=ok_max and ok_min)


def dump_system(A, b, path):
    """Coordinate text dump: 'i j value' triplets, 0-based, lower triangle."""
    coo = sp.coo_matrix(sp.tril(A))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {A.shape[0]} {A.shape[0]} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v:.17e}\n")
        fh.write("# rhs\n")
        for v in b:
            fh.write(f"{v:.17e}\n")
