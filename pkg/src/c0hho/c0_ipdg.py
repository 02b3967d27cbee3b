"""C0 interior-penalty DG discretization on the continuous degree-l cell space.

The bilinear form adds to the broken Hessian product a penalty on the
jump of the normal derivative plus the symmetric consistency terms with
the average of the normal-normal derivative.  Jumps and averages are
oriented by n_F, with the first adjacent cell the one n_F exits; on
boundary faces (type I only) the jump is the one-sided trace and the
average the one-sided value.  The clamped normal-derivative condition is
imposed weakly (Nitsche), with data moved to the load.
"""

import time

import numpy as np
import scipy.sparse as sp

from . import fe_space as fes
from . import hho_local as hl
from . import system as syst
from .errors import InputError


class IpdgSystem:
    def __init__(self, mesh, dofmap, A_full, b_full, x_ess, penalty, bc,
                 load, assembly_s, node_set):
        self.mesh = mesh
        self.dofmap = dofmap
        self.A_full = A_full
        self.b_full = b_full
        self.x_ess = x_ess
        self.penalty = penalty
        self.penalty_warning = penalty < 1.0
        self.bc = bc
        self.load = load
        self.assembly_s = assembly_s
        self.node_set = node_set
        n = dofmap.n_cell_dofs
        ess = dofmap.essential_mask[:n].copy()
        self.free_idx = np.nonzero(~ess)[0]
        self.ess_idx = np.nonzero(ess)[0]
        self.A = A_full[self.free_idx][:, self.free_idx].tocsc()
        self.b = b_full[self.free_idx] - \
            A_full[self.free_idx][:, self.ess_idx] @ x_ess[self.ess_idx]

    @property
    def n_free(self):
        return len(self.free_idx)

    def full_vector(self, x_free):
        x = self.x_ess.copy()
        x[self.free_idx] = x_free
        return x

    def free_values(self, x_full):
        return x_full[self.free_idx]


def _face_trace_ops(mesh, dm, f, rule, node_set):
    """Normal-derivative and normal-normal traces of the adjacent cells'
    bases at the face quadrature points, oriented by n_F."""
    L = float(mesh.face_lengths[f])
    t = rule.points * L
    w = rule.weights * L
    X = mesh.face_starts[f][None, :] + np.outer(t, mesh.face_tangents[f])
    nF = mesh.face_normals[f]
    sides = []
    for c in mesh.face_cells[f]:
        if c < 0:
            continue
        cb = fes.CellBasis(mesh.cell_vertices(c), dm.p, node_set)
        dn = cb.gradients(X) @ nF
        dnn = np.einsum("a,ipab,b->ip", nF, cb.hessians(X), nF)
        sides.append((dm.cell_dofs[c], dn, dnn))
    return X, w, nF, sides


def _face_patterns(mesh):
    """Group faces sharing the same translated geometry: the pattern key is
    the shape-group of each adjacent cell plus the face's local edge index
    in it, which fixes the face block up to translation."""
    groups = mesh.shape_groups()
    cell_group = np.empty(mesh.n_cells, dtype=np.int64)
    for g, (_, cells) in enumerate(groups):
        cell_group[cells] = g
    patterns = {}
    le_of = {}
    for c in range(mesh.n_cells):
        for le in range(3):
            le_of[(c, int(mesh.cell_faces[c, le]))] = le
    for f in range(mesh.n_faces):
        k1, k2 = mesh.face_cells[f]
        key = (int(cell_group[k1]), le_of[(int(k1), f)])
        if k2 >= 0:
            key = key + (int(cell_group[k2]), le_of[(int(k2), f)])
        patterns.setdefault(key, []).append(f)
    return [(np.array(faces, dtype=np.int64), len(key) == 2)
            for key, faces in patterns.items()]


def assemble_ipdg(mesh, ell_deg, bc, load, n_penalty=4.0, node_set="lattice",
                  q_rhs=None):
    """Assemble the C0-IPDG system at cell degree ell_deg = k + 2.

    Penalty weight per face: n_penalty (k+1)^2 / h_F.  Interior faces only
    for type II; all faces for type I.
    """
    t0 = time.perf_counter()
    if ell_deg < 2:
        raise InputError("IPDG cell degree must be >= 2")
    k = ell_deg - 2
    load.validate(bc)
    dm = fes.build_dof_map(mesh, k, bc)
    n = dm.n_cell_dofs
    if q_rhs is None:
        q_rhs = dm.p + 4
    varpi = float(n_penalty) * (k + 1) ** 2

    rows, cols, vals = [], [], []
    for rep, cells in mesh.shape_groups():
        lc = hl.LocalCell.from_mesh(mesh, rep, k, node_set)
        G = hl.hessian_gram(lc)
        gd = dm.cell_dofs[cells]
        nb = gd.shape[1]
        rows.append(np.repeat(gd, nb, axis=1).ravel())
        cols.append(np.tile(gd, (1, nb)).ravel())
        vals.append(np.tile(G.ravel(), (len(cells), 1)).ravel())

    rule = fes.face_quadrature(2 * dm.p)
    for faces, is_boundary in _face_patterns(mesh):
        if is_boundary and bc == "II":
            continue
        f0 = int(faces[0])
        _, w, _, sides = _face_trace_ops(mesh, dm, f0, rule, node_set)
        if is_boundary:
            jump = sides[0][1]
            avg = sides[0][2]
            dofs = dm.cell_dofs[mesh.face_cells[faces, 0]]
        else:
            jump = np.vstack([sides[0][1], -sides[1][1]])
            avg = 0.5 * np.vstack([sides[0][2], sides[1][2]])
            dofs = np.concatenate([dm.cell_dofs[mesh.face_cells[faces, 0]],
                                   dm.cell_dofs[mesh.face_cells[faces, 1]]], axis=1)
        hterm = varpi / float(mesh.face_lengths[f0])
        block = hterm * np.einsum("ip,jp,p->ij", jump, jump, w)
        cons = np.einsum("ip,jp,p->ij", avg, jump, w)
        block -= cons + cons.T
        m = dofs.shape[1]
        rows.append(np.repeat(dofs, m, axis=1).ravel())
        cols.append(np.tile(dofs, (1, m)).ravel())
        vals.append(np.tile(block.ravel(), (len(faces), 1)).ravel())

    A_full = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()

    b_full = np.zeros(dm.n_total)
    if load.f_reg is not None:
        syst._add_volume_load(mesh, dm, _gram_groups(mesh), load,
                              dm.p + q_rhs, node_set, b_full)
    if load.line_segment is not None:
        syst._add_line_load(mesh, dm, load, dm.p + q_rhs, node_set, b_full)
    b_full = b_full[:n]
    _add_boundary_data_terms(mesh, dm, bc, load, varpi, rule, node_set, b_full)

    x_ess = np.zeros(n)
    if load.g0 is not None:
        syst.trace_values(mesh, dm, load.g0, x_ess)
    return IpdgSystem(mesh, dm, A_full, b_full, x_ess, varpi, bc,
                      load, time.perf_counter() - t0, node_set)


def _gram_groups(mesh):
    # volume-load helper only needs the group partition, not operators
    return [(None, cells) for _, cells in mesh.shape_groups()]


def _add_boundary_data_terms(mesh, dm, bc, load, varpi, rule, node_set, b):
    if bc == "I" and load.g1 is None:
        return
    if bc == "II" and load.g2 is None:
        return
    for f in dm.boundary_face_idx:
        X, w, nF, sides = _face_trace_ops(mesh, dm, f, rule, node_set)
        dofs, dn, dnn = sides[0]
        normals = np.tile(nF, (len(X), 1))
        if bc == "I":
            g = np.asarray(load.g1(X, normals), dtype=float)
            h_inv = varpi / float(mesh.face_lengths[f])
            b[dofs] += h_inv * (dn @ (g * w)) - dnn @ (g * w)
        else:
            g = np.asarray(load.g2(X, normals), dtype=float)
            b[dofs] += dn @ (g * w)


def cell_field(ipdg_sys, x_full):
    """Per-cell coefficient array of the solution (IPDG 'reconstruction')."""
    return x_full[ipdg_sys.dofmap.cell_dofs]


def jump_seminorm(ipdg_sys, x_full, include_boundary_data=True):
    """Penalty-weighted jump seminorm of the normal derivative:
    (sum_F varpi h_F^-1 ||[dn u]||_F^2)^(1/2), with the prescribed g1
    subtracted on boundary faces for type I."""
    mesh = ipdg_sys.mesh
    dm = ipdg_sys.dofmap
    rule = fes.face_quadrature(2 * dm.p + 4)
    total = 0.0
    for faces, is_boundary in _face_patterns(mesh):
        if is_boundary and ipdg_sys.bc == "II":
            continue
        f0 = int(faces[0])
        _, w, _, sides = _face_trace_ops(mesh, dm, f0, rule, ipdg_sys.node_set)
        k1 = mesh.face_cells[faces, 0]
        jump = x_full[dm.cell_dofs[k1]] @ sides[0][1]
        if is_boundary:
            if include_boundary_data and ipdg_sys.load.g1 is not None:
                for i, f in enumerate(faces):
                    L = float(mesh.face_lengths[f])
                    X = mesh.face_starts[f][None, :] \
                        + np.outer(rule.points * L, mesh.face_tangents[f])
                    nrm = np.tile(mesh.face_normals[f], (len(X), 1))
                    jump[i] -= np.asarray(ipdg_sys.load.g1(X, nrm), dtype=float)
        else:
            k2 = mesh.face_cells[faces, 1]
            jump = jump - x_full[dm.cell_dofs[k2]] @ sides[1][1]
        hterm = ipdg_sys.penalty / float(mesh.face_lengths[f0])
        total += hterm * np.sum((jump ** 2) @ w)
    return float(np.sqrt(total))
