import numpy as np
import pytest

from c0hho import fe_space as fes
from c0hho import hho_local as hl
from c0hho import mesh as msh

REF = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def random_triangle(rng, min_quality=0.15):
    while True:
        verts = rng.random((3, 2)) * 4.0 - 2.0
        e1 = verts[1] - verts[0]
        e2 = verts[2] - verts[0]
        a2 = e1[0] * e2[1] - e1[1] * e2[0]
        if a2 < 0:
            verts[[1, 2]] = verts[[2, 1]]
            a2 = -a2
        d = max(np.hypot(*(verts[i] - verts[j])) for i in range(3) for j in range(i))
        if a2 / 2 > min_quality * d * d:
            return verts


def monomials(p):
    out = []
    for a in range(p + 1):
        for b in range(p + 1 - a):
            def f(x, a=a, b=b):
                return x[:, 0] ** a * x[:, 1] ** b

            def g(x, a=a, b=b):
                gx = a * x[:, 0] ** (a - 1) * x[:, 1] ** b if a else np.zeros(len(x))
                gy = b * x[:, 0] ** a * x[:, 1] ** (b - 1) if b else np.zeros(len(x))
                return np.stack([gx, gy], axis=-1)

            out.append((a, b, f, g))
    return out


# -------------------------------------------------------------------- reduce

def test_reduce_constant():
    lc = hl.LocalCell(REF, 1)
    red = hl.reduce_cell(lc, lambda x: np.full(len(x), 4.5),
                         lambda x: np.zeros((len(x), 2)))
    assert np.abs(red.cell - 4.5).max() < 1e-14
    assert np.abs(red.faces).max() < 1e-14


def test_reduce_linear_face_values():
    # v = x on the reference triangle: n_K . grad v per face is the normal's
    # x-component: (0, sqrt(2)/2, -1) on (y=0, hypotenuse, x=0)
    lc = hl.LocalCell(REF, 0)
    red = hl.reduce_cell(lc, lambda x: x[:, 0],
                         lambda x: np.column_stack([np.ones(len(x)), np.zeros(len(x))]))
    values = [red.faces[le, 0] * fes.face_basis_values(0, np.array([0.3]), lc.face_lengths[le])[0, 0]
              for le in range(3)]
    assert np.allclose(values, [0.0, np.sqrt(2) / 2, -1.0], atol=1e-13)


def test_reduce_sine_projection_oracle():
    lc = hl.LocalCell(REF, 1)
    red = hl.reduce_cell(lc, lambda x: np.sin(np.pi * x[:, 0]),
                         lambda x: np.column_stack([np.pi * np.cos(np.pi * x[:, 0]),
                                                    np.zeros(len(x))]))
    # face y=0: normal (0,-1), so the projected normal derivative vanishes
    assert np.abs(red.faces[0]).max() < 1e-13
    # face x=0: normal (-1,0): -pi cos(0) = -pi constant along the face
    L = lc.face_lengths[2]
    # independent 1D quadrature oracle for the projection coefficients
    rule = fes.face_quadrature(40)
    t = rule.points * L
    w = rule.weights * L
    x = lc.face_points(2, t)
    dn = -np.pi * np.cos(np.pi * x[:, 0])
    psi = fes.face_basis_values(1, t, L)
    oracle = psi @ (dn * w)
    assert np.abs(red.faces[2] - oracle).max() < 1e-12
    assert abs(oracle[1]) < 1e-12 and abs(oracle[0] + np.pi) < 1e-12


# ------------------------------------------------------------- reconstruction

@pytest.mark.parametrize("k", range(5))
def test_reconstruction_polynomial_exactness(k):
    rng = np.random.default_rng(100 + k)
    n_tri = 20 if k <= 2 else 8
    for trial in range(n_tri):
        verts = REF if trial == 0 else random_triangle(rng)
        lc = hl.LocalCell(verts, k)
        R = hl.build_reconstruction(lc)
        S = hl.build_stabilization(lc, "paper_h_inv")
        for a, b, f, g in monomials(k + 2):
            red = hl.reduce_cell(lc, f, g).flat
            rec = R @ red
            scale = max(1.0, np.abs(f(lc.basis.nodes)).max())
            assert np.abs(rec - f(lc.basis.nodes)).max() < 1e-9 * scale
            assert red @ S @ red < 1e-10 * max(1.0, red @ red)


def test_reconstruction_zero_and_linearity():
    lc = hl.LocalCell(REF, 1)
    R = hl.build_reconstruction(lc)
    assert np.abs(R @ np.zeros(lc.n_local)).max() == 0.0


def test_reconstruction_residual_vs_lstsq_oracle():
    # input (v = x^2, gamma = 0), k = 0: check the defining equations with an
    # independently assembled dense least-squares system in monomials
    lc = hl.LocalCell(REF, 0)
    R = hl.build_reconstruction(lc)
    vec = np.zeros(lc.n_local)
    vec[:lc.n_cell] = lc.basis.nodes[:, 0] ** 2
    rec = R @ vec

    p = 2
    mono = monomials(p)
    rule = fes.cell_quadrature(2 * p + 2)
    X = lc.basis.map_reference(rule.points)
    w = rule.weights * abs(lc.basis.detB)

    def hess_mono(a, b, x):
        H = np.zeros((len(x), 2, 2))
        if a >= 2:
            H[:, 0, 0] = a * (a - 1) * x[:, 0] ** (a - 2) * x[:, 1] ** b
        if a >= 1 and b >= 1:
            H[:, 0, 1] = H[:, 1, 0] = a * b * x[:, 0] ** (a - 1) * x[:, 1] ** (b - 1)
        if b >= 2:
            H[:, 1, 1] = b * (b - 1) * x[:, 0] ** a * x[:, 1] ** (b - 2)
        return H

    frule = fes.face_quadrature(2 * p + 2)
    rows = []
    rhs = []
    for ia, (a, b, _, _) in enumerate(mono):
        Hw = hess_mono(a, b, X)
        row = np.zeros(len(mono))
        target = 0.0
        for jb, (c, d, _, _) in enumerate(mono):
            Hv = hess_mono(c, d, X)
            row[jb] = np.einsum("pij,pij,p->", Hv, Hw, w)
        target = np.einsum("pij,pij,p->", hess_mono(2, 0, X), Hw, w)
        for le in range(3):
            L = lc.face_lengths[le]
            t = frule.points * L
            wt = frule.weights * L
            xq = lc.face_points(le, t)
            n = lc.normals[le]
            dn_v = 2 * xq[:, 0] * n[0]
            dnn_w = np.einsum("i,pij,j->p", n, hess_mono(a, b, xq), n)
            target -= np.sum(dn_v * dnn_w * wt)
        rows.append(row)
        rhs.append(target)
    # moment conditions against 1, x, y
    for a, b in [(0, 0), (1, 0), (0, 1)]:
        row = np.array([np.sum(X[:, 0] ** (a + c) * X[:, 1] ** (b + d) * w)
                        for c, d, _, _ in mono])
        rows.append(row)
        rhs.append(np.sum(X[:, 0] ** (a + 2) * X[:, 1] ** b * w))
    coef, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)

    sample = lc.basis.map_reference(np.array([[0.2, 0.1], [0.1, 0.6], [0.4, 0.4]]))
    oracle_vals = sum(coef[j] * sample[:, 0] ** c * sample[:, 1] ** d
                      for j, (c, d, _, _) in enumerate(mono))
    rec_vals = rec @ lc.basis.values(sample)
    assert np.abs(rec_vals - oracle_vals).max() < 1e-11


# -------------------------------------------------------------- stabilization

def test_stabilization_hand_value():
    lc = hl.LocalCell(REF, 0)
    S = hl.build_stabilization(lc, "paper_h_inv")
    vec = np.zeros(lc.n_local)
    # gamma identically 1 on each face: coefficient of the constant mode is sqrt(L)
    for le in range(3):
        vec[lc.n_cell + le] = np.sqrt(lc.face_lengths[le])
    assert abs(vec @ S @ vec - (1 + np.sqrt(2))) < 1e-13


def test_stabilization_weight_scaling():
    lc = hl.LocalCell(REF, 2)
    S1 = hl.build_stabilization(lc, "paper_h_inv")
    S2 = hl.build_stabilization(lc, "weighted_k")
    assert np.abs(S2 - 9.0 * S1).max() < 1e-12 * np.abs(S1).max()


# ------------------------------------------------------------ local stiffness

def test_stiffness_affine_kernel_and_x2_energy():
    lc = hl.LocalCell(REF, 0)
    op = hl.local_stiffness(lc, "paper_h_inv")
    for f, g in [(lambda x: np.ones(len(x)), lambda x: np.zeros((len(x), 2))),
                 (lambda x: x[:, 0], lambda x: np.column_stack([np.ones(len(x)), np.zeros(len(x))])),
                 (lambda x: 1 - 2 * x[:, 0] + 3 * x[:, 1],
                  lambda x: np.tile([-2.0, 3.0], (len(x), 1)))]:
        red = hl.reduce_cell(lc, f, g).flat
        assert red @ op.stiffness @ red < 1e-10 * max(1.0, red @ red)
    red = hl.reduce_cell(lc, lambda x: x[:, 0] ** 2,
                         lambda x: np.column_stack([2 * x[:, 0], np.zeros(len(x))])).flat
    assert abs(red @ op.stiffness @ red - 2.0) < 1e-9


@pytest.mark.parametrize("k", range(4))
def test_null_space_dimension(k):
    rng = np.random.default_rng(200 + k)
    for trial in range(20):
        lc = hl.LocalCell(random_triangle(rng), k)
        op = hl.local_stiffness(lc)
        ev = np.linalg.eigvalsh(op.stiffness)
        assert (ev < 1e-10 * ev[-1]).sum() == 3
        assert ev[3] > 1e-8 * ev[-1]


def test_norm_equivalence_bracket_across_levels():
    # generalized eigenvalues of a_K against the energy-seminorm Gram stay in
    # a mesh-independent bracket under refinement (fixed k)
    k = 1
    brackets = []
    for n in [2, 4, 8]:
        m = msh.generate_structured(n)
        lc = hl.LocalCell.from_mesh(m, 0, k)
        op = hl.local_stiffness(lc, "paper_h_inv")
        N = hl.seminorm_gram(lc)
        lam, U = np.linalg.eigh(N)
        keep = lam > 1e-10 * lam[-1]
        Z = U[:, keep] / np.sqrt(lam[keep])
        mu = np.linalg.eigvalsh(Z.T @ op.stiffness @ Z)
        mu = mu[mu > 1e-12 * mu[-1]]
        brackets.append((mu.min(), mu.max()))
    lo = [b[0] for b in brackets]
    hi = [b[1] for b in brackets]
    assert max(lo) / min(lo) < 1.5
    assert max(hi) / min(hi) < 1.5
    assert min(lo) > 1e-3 and max(hi) < 1e3


def test_energy_rigid_motion_invariance():
    rng = np.random.default_rng(9)
    verts = random_triangle(rng)
    theta = 0.7
    Rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shift = np.array([1.3, -0.2])
    verts2 = verts @ Rot.T + shift

    def f(x):
        return x[:, 0] ** 3 - x[:, 1] ** 2 + 2 * x[:, 0] * x[:, 1]

    def g(x):
        return np.stack([3 * x[:, 0] ** 2 + 2 * x[:, 1],
                         -2 * x[:, 1] + 2 * x[:, 0]], axis=-1)

    def f2(x):
        return f((x - shift) @ Rot)

    def g2(x):
        return g((x - shift) @ Rot) @ Rot.T

    for k in [0, 2]:
        lc1 = hl.LocalCell(verts, k)
        lc2 = hl.LocalCell(verts2, k)
        e1 = hl.reduce_cell(lc1, f, g).flat
        e2 = hl.reduce_cell(lc2, f2, g2).flat
        a1 = e1 @ hl.local_stiffness(lc1).stiffness @ e1
        a2 = e2 @ hl.local_stiffness(lc2).stiffness @ e2
        assert abs(a1 - a2) < 1e-11 * abs(a1)
