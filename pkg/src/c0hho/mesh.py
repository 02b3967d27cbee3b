"""Conforming triangulations of rectangles with face connectivity and orientation.

Cells are CCW vertex triples.  Every face carries a fixed unit normal n_F
and is parameterized by arclength in the direction obtained by rotating
n_F by +90 degrees; the adjacent cell out of which n_F points is always
listed first.  For interior faces the parameterization runs from the
lower-indexed endpoint to the higher-indexed one; boundary faces are
oriented by the outward domain normal.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass
class FaceRecord:
    endpoints: tuple          # vertex ids in parameterization order (start, end)
    normal: np.ndarray        # unit n_F, points out of cells[0]
    cells: tuple              # (K1, K2 or None)
    length: float

    @property
    def is_boundary(self):
        return self.cells[1] is None


@dataclass
class CellGeometry:
    diameter: float           # longest edge
    area: float
    normals: np.ndarray       # (3, 2) outward unit normals, edge order (v0v1, v1v2, v2v0)
    lengths: np.ndarray       # (3,) edge lengths


class Mesh:
    """Immutable triangulation. Construct via generate_structured / from_arrays / from_text."""

    def __init__(self, vertices, cells, domain=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise InputError("vertices must be an (V, 2) array")
        if self.cells.ndim != 2 or self.cells.shape[1] != 3:
            raise InputError("cells must be a (C, 3) array of vertex indices")
        v = self.vertices
        t = self.cells
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        areas2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(areas2 <= 0.0):
            bad = int(np.argmax(areas2 <= 0.0))
            raise InputError(f"cell {bad} is degenerate or not counter-clockwise")
        self.cell_areas = 0.5 * areas2
        if domain is None:
            domain = (v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max())
        self.domain = tuple(float(x) for x in domain)
        self._build_faces()

    # ------------------------------------------------------------------ faces

    def _build_faces(self):
        v = self.vertices
        n_cells = len(self.cells)
        face_of = {}
        endpoints = []
        adj = []                      # [K1, K2]
        traversal = []                # cell that first walked the edge, and its direction
        self.cell_faces = np.empty((n_cells, 3), dtype=np.int64)
        self.cell_face_signs = np.empty((n_cells, 3))

        for c, tri in enumerate(self.cells):
            for le in range(3):
                a, b = int(tri[le]), int(tri[(le + 1) % 3])
                key = (a, b) if a < b else (b, a)
                f = face_of.get(key)
                if f is None:
                    f = len(endpoints)
                    face_of[key] = f
                    endpoints.append(key)          # provisional: lo -> hi
                    adj.append([c, None])
                    traversal.append((c, a == key[0]))
                else:
                    if adj[f][1] is not None:
                        raise InputError(f"edge {key} shared by more than two cells")
                    adj[f][1] = c
                self.cell_faces[c, le] = f

        n_faces = len(endpoints)
        ep = np.array(endpoints, dtype=np.int64)
        cells2 = np.full((n_faces, 2), -1, dtype=np.int64)
        for f, (k1, k2) in enumerate(adj):
            cells2[f, 0] = k1
            if k2 is not None:
                cells2[f, 1] = k2

        # Fix orientation. A CCW cell walking a -> b has outward normal
        # rot(-90) of (b - a); n_F must exit the first listed cell.
        for f in range(n_faces):
            c_first, walked_lo_hi = traversal[f]
            if cells2[f, 1] >= 0:
                # interior: keep lo -> hi parameterization; first cell is the
                # one whose CCW walk agrees with it
                if not walked_lo_hi:
                    cells2[f] = cells2[f, ::-1]
            else:
                # boundary: outward normal, i.e. parameterize along the walk
                if not walked_lo_hi:
                    ep[f] = ep[f, ::-1]

        d = v[ep[:, 1]] - v[ep[:, 0]]
        lengths = np.hypot(d[:, 0], d[:, 1])
        if np.any(lengths <= 0.0):
            raise InputError("zero-length edge in mesh")
        tangents = d / lengths[:, None]
        normals = np.column_stack([tangents[:, 1], -tangents[:, 0]])

        self.face_endpoints = ep
        self.face_starts = v[ep[:, 0]]
        self.face_tangents = tangents
        self.face_normals = normals
        self.face_lengths = lengths
        self.face_cells = cells2
        self.boundary_faces = cells2[:, 1] < 0

        # sign n_F . n_K per (cell, local edge)
        for c, tri in enumerate(self.cells):
            for le in range(3):
                f = self.cell_faces[c, le]
                a, b = int(tri[le]), int(tri[(le + 1) % 3])
                eo = v[b] - v[a]
                out = np.array([eo[1], -eo[0]])
                self.cell_face_signs[c, le] = 1.0 if out @ normals[f] > 0 else -1.0

    # ------------------------------------------------------------- properties

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_faces(self):
        return len(self.face_lengths)

    def face(self, f):
        k1, k2 = self.face_cells[f]
        return FaceRecord(
            endpoints=(int(self.face_endpoints[f, 0]), int(self.face_endpoints[f, 1])),
            normal=self.face_normals[f],
            cells=(int(k1), int(k2) if k2 >= 0 else None),
            length=float(self.face_lengths[f]),
        )

    def cell_vertices(self, c):
        return self.vertices[self.cells[c]]

    def cell_geometry(self, c):
        pts = self.cell_vertices(c)
        e = np.array([pts[1] - pts[0], pts[2] - pts[1], pts[0] - pts[2]])
        lengths = np.hypot(e[:, 0], e[:, 1])
        normals = np.column_stack([e[:, 1], -e[:, 0]]) / lengths[:, None]
        return CellGeometry(
            diameter=float(lengths.max()),
            area=float(self.cell_areas[c]),
            normals=normals,
            lengths=lengths,
        )

    @property
    def h_max(self):
        v = self.vertices
        t = self.cells
        best = 0.0
        for le in range(3):
            d = v[t[:, (le + 1) % 3]] - v[t[:, le]]
            best = max(best, float(np.hypot(d[:, 0], d[:, 1]).max()))
        return best

    # ------------------------------------------------------------ shape groups

    def shape_groups(self):
        """Group cells sharing the same local geometry (affine map + face
        parameterization relative to the cell), so per-cell dense operators
        are built once per group.  Returns a list of (representative, indices)."""
        v = self.vertices
        t = self.cells
        sig = np.empty((self.n_cells, 10))
        sig[:, 0:2] = v[t[:, 1]] - v[t[:, 0]]
        sig[:, 2:4] = v[t[:, 2]] - v[t[:, 0]]
        for le in range(3):
            f = self.cell_faces[:, le]
            sig[:, 4 + 2 * le:6 + 2 * le] = self.face_starts[f] - v[t[:, 0]]
        scale = max(self.h_max, 1e-30)
        q = np.round(sig / scale, 12)
        _, first, inverse = np.unique(q, axis=0, return_index=True, return_inverse=True)
        groups = []
        for g in range(len(first)):
            idx = np.nonzero(inverse == g)[0]
            groups.append((int(idx[0]), idx))
        return groups

    # ------------------------------------------------------------ segment clip

    def clip_segment_to_cells(self, p0, p1, tol=1e-12):
        """Partition a segment into per-cell sub-segments.

        Sub-segments shorter than tol * segment length are dropped; when the
        segment lies on a mesh face the lower-indexed adjacent cell wins.
        """
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        a, b, c, d = self.domain
        eps = tol * max(b - a, d - c, 1.0)
        for p in (p0, p1):
            if not (a - eps <= p[0] <= b + eps and c - eps <= p[1] <= d + eps):
                raise InputError(f"segment endpoint {tuple(p)} lies outside the domain")
        seg = p1 - p0
        seg_len = float(np.hypot(*seg))
        if seg_len < tol:
            return []

        lo = np.minimum(p0, p1) - eps
        hi = np.maximum(p0, p1) + eps
        v = self.vertices
        t = self.cells
        cmin = np.minimum(np.minimum(v[t[:, 0]], v[t[:, 1]]), v[t[:, 2]])
        cmax = np.maximum(np.maximum(v[t[:, 0]], v[t[:, 1]]), v[t[:, 2]])
        candidates = np.nonzero(
            (cmax[:, 0] >= lo[0]) & (cmin[:, 0] <= hi[0])
            & (cmax[:, 1] >= lo[1]) & (cmin[:, 1] <= hi[1])
        )[0]

        found = []
        for cidx in candidates:
            pts = v[t[cidx]]
            t_in, t_out = 0.0, 1.0
            for le in range(3):
                pa = pts[le]
                pb = pts[(le + 1) % 3]
                e = pb - pa
                n_out = np.array([e[1], -e[0]])           # outward for CCW
                denom = float(n_out @ seg)
                num = float(n_out @ (pa - p0))
                if abs(denom) < 1e-300:
                    if num < -eps:                         # entirely outside
                        t_in, t_out = 1.0, 0.0
                        break
                    continue
                tc = num / denom
                if denom > 0:
                    t_out = min(t_out, tc)
                else:
                    t_in = max(t_in, tc)
                if t_in >= t_out:
                    break
            if t_out - t_in > tol:
                found.append((int(cidx), t_in, t_out))

        # resolve duplicates from face-collinear runs: sweep in (t, cell) order
        found.sort(key=lambda r: (r[1], r[0]))
        result = []
        covered = 0.0
        for cidx, t_in, t_out in found:
            t_in = max(t_in, covered)
            if (t_out - t_in) * seg_len <= tol * max(seg_len, 1.0):
                continue
            result.append((cidx, (p0 + t_in * seg, p0 + t_out * seg)))
            covered = t_out
        return result

    def split_cell_by_vertical_line(self, c, x0, tol=1e-12):
        """Split a cell into sub-triangles lying entirely on one side of x = x0.

        Returns a list of (vertices (3, 2), side) with side = -1 (x <= x0)
        or +1 (x >= x0).  Used to integrate piecewise-smooth data exactly
        on cells that straddle the line.
        """
        pts = self.cell_vertices(c)
        s = pts[:, 0] - x0
        scale = max(abs(s).max(), 1.0)
        if np.all(s >= -tol * scale):
            return [(pts, +1)]
        if np.all(s <= tol * scale):
            return [(pts, -1)]
        left, right = [], []
        for i in range(3):
            j = (i + 1) % 3
            pi, pj = pts[i], pts[j]
            si, sj = s[i], s[j]
            (left if si <= 0 else right).append(pi)
            if si * sj < 0:
                lam = si / (si - sj)
                q = pi + lam * (pj - pi)
                left.append(q)
                right.append(q)
        out = []
        for poly, side in ((left, -1), (right, +1)):
            for i in range(1, len(poly) - 1):
                tri = np.array([poly[0], poly[i], poly[i + 1]])
                e1 = tri[1] - tri[0]
                e2 = tri[2] - tri[0]
                a2 = e1[0] * e2[1] - e1[1] * e2[0]
                if abs(a2) < tol * scale * scale:
                    continue
                if a2 < 0:
                    tri[[1, 2]] = tri[[2, 1]]
                out.append((tri, side))
        return out


def generate_structured(n, domain=(0.0, 1.0, 0.0, 1.0)):
    """n x n grid of squares on [a,b] x [c,d], each split along the
    lower-left -> upper-right diagonal: 2 n^2 cells, (n+1)^2 vertices,
    3 n^2 + 2 n faces."""
    if n < 1:
        raise InputError("structured mesh needs n >= 1")
    a, b, c, d = (float(x) for x in domain)
    xs = np.linspace(a, b, n + 1)
    ys = np.linspace(c, d, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    q = 0
    for j in range(n):
        for i in range(n):
            v00 = vid(i, j)
            v10 = vid(i + 1, j)
            v01 = vid(i, j + 1)
            v11 = vid(i + 1, j + 1)
            cells[q] = (v00, v10, v11)
            cells[q + 1] = (v00, v11, v01)
            q += 2
    return Mesh(vertices, cells, domain=(a, b, c, d))


def from_text(text):
    """Plain-text mesh: line 1 "V E C", V lines "x y", C lines "i j k"
    (0-based CCW).  Faces and normals are derived, never read."""
    tokens = text.split()
    if len(tokens) < 3:
        raise InputError("mesh text: missing header 'V E C'")
    try:
        nv, ne, nc = int(tokens[0]), int(tokens[1]), int(tokens[2])
    except ValueError as exc:
        raise InputError(f"mesh text: bad header: {exc}") from None
    need = 3 + 2 * nv + 3 * nc
    if len(tokens) != need:
        raise InputError(f"mesh text: expected {need} tokens, found {len(tokens)}")
    try:
        verts = np.array(tokens[3:3 + 2 * nv], dtype=float).reshape(nv, 2)
        cells = np.array(tokens[3 + 2 * nv:], dtype=np.int64).reshape(nc, 3)
    except ValueError as exc:
        raise InputError(f"mesh text: bad number: {exc}") from None
    if cells.min(initial=0) < 0 or cells.max(initial=-1) >= nv:
        raise InputError("mesh text: vertex index out of range")
    mesh = Mesh(verts, cells)
    if mesh.n_faces != ne:
        raise InputError(f"mesh text: header declares {ne} edges, derived {mesh.n_faces}")
    return mesh


def read_mesh(path):
    with open(path, "r", encoding="utf-8") as fh:
        return from_text(fh.read())
