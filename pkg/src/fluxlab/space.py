"""Degree-of-freedom maps, constraints and discrete fields.

Lagrange spaces number every node, hanging ones included: vertex DOFs
first, then p-1 DOFs per face entity (fine faces and split coarse faces),
then (p-1)^2 interior DOFs per cell.  Hanging nodes are slaves of the
coarse face they lie on, with weights given by the 1D Lagrange basis of the
coarse face evaluated at the slave position.  Dirichlet DOFs are slaves
without masters.  The full vector is u = P u_free + b.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .elements import FACE_AXIS, lagrange, raviart_thomas
from .mesh import DIRICHLET

FAMILIES = ("lagrange", "rt", "broken_rt")


@dataclass
class ConstraintSet:
    """Linear constraints u[s] = sum_m w u[m] + inhom[s] for slave DOFs s."""

    n_dofs: int
    slaves: np.ndarray
    indptr: np.ndarray
    masters: np.ndarray
    weights: np.ndarray
    inhom: np.ndarray

    @classmethod
    def empty(cls, n):
        z = np.zeros(0, dtype=np.int64)
        return cls(n, z, np.zeros(1, dtype=np.int64), z, np.zeros(0), np.zeros(0))

    def merged(self, other):
        """Union of two constraint sets; masters constrained by ``other`` are resolved."""
        if np.intersect1d(self.slaves, other.slaves).size:
            raise ValueError("a DOF is constrained twice")
        slaves = np.concatenate([self.slaves, other.slaves])
        order = np.argsort(slaves)
        rows = []
        for cs in (self, other):
            for i in range(len(cs.slaves)):
                s, e = cs.indptr[i], cs.indptr[i + 1]
                rows.append((cs.masters[s:e], cs.weights[s:e], cs.inhom[i]))
        rows = [rows[i] for i in order]
        lookup = {int(s): r for s, r in zip(slaves[order], rows)}
        masters, weights, inhom, indptr = [], [], [], [0]
        for ms, ws, b in rows:
            mm, ww = [], []
            for m, w in zip(ms, ws):
                if int(m) in lookup:
                    m2, w2, b2 = lookup[int(m)]
                    if len(m2):
                        raise ValueError("chained constraints are not supported")
                    b += w * b2
                else:
                    mm.append(m)
                    ww.append(w)
            masters += mm
            weights += ww
            inhom.append(b)
            indptr.append(len(masters))
        return ConstraintSet(self.n_dofs, slaves[order], np.array(indptr, dtype=np.int64),
                             np.array(masters, dtype=np.int64), np.array(weights, dtype=float),
                             np.array(inhom, dtype=float))

    @property
    def free(self):
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.slaves] = False
        return np.flatnonzero(mask)

    def prolongation(self):
        """(P, b) with u_all = P @ u_free + b."""
        free = self.free
        nf = len(free)
        col = np.full(self.n_dofs, -1, dtype=np.int64)
        col[free] = np.arange(nf)
        rows = [free]
        cols = [np.arange(nf)]
        vals = [np.ones(nf)]
        cnt = np.diff(self.indptr)
        if len(self.masters):
            mc = col[self.masters]
            if (mc < 0).any():
                raise ValueError("constraint master is itself constrained")
            rows.append(np.repeat(self.slaves, cnt))
            cols.append(mc)
            vals.append(self.weights)
        P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n_dofs, nf))
        b = np.zeros(self.n_dofs)
        b[self.slaves] = self.inhom
        return P, b

    def distribute(self, u):
        """Overwrite slave entries from their masters (idempotent)."""
        u = np.array(u, dtype=float, copy=True)
        cnt = np.diff(self.indptr)
        vals = np.asarray(self.inhom, dtype=float).copy()
        if len(self.masters):
            np.add.at(vals, np.repeat(np.arange(len(self.slaves)), cnt), self.weights * u[self.masters])
        u[self.slaves] = vals
        return u


class DofMap:
    """Global numbering for one function space family on a mesh."""

    def __init__(self, mesh, family, degree):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}")
        self.mesh, self.family, self.degree = mesh, family, degree
        if family == "lagrange":
            self._lagrange()
        else:
            self._rt(broken=family == "broken_rt")

    def _lagrange(self):
        mesh, p = self.mesh, self.degree
        self.element = lagrange(p)
        nv, nF, N = mesh.n_vertices, mesh.n_faces, mesh.n_cells
        self.n_face_interior = p - 1
        self.face_offset = nv
        self.cell_offset = nv + nF * (p - 1)
        self.n_dofs = self.cell_offset + N * (p - 1) ** 2
        cd = np.empty((N, (p + 1) ** 2), dtype=np.int64)
        cv = mesh.cell_vertices
        for c, (i, j) in enumerate(((0, 0), (p, 0), (0, p), (p, p))):
            cd[:, i + (p + 1) * j] = cv[:, c]
        for t in range(1, p):
            for d, (i, j) in enumerate(((0, t), (p, t), (t, 0), (t, p))):
                cd[:, i + (p + 1) * j] = nv + mesh.cell_face[:, d] * (p - 1) + (t - 1)
            for s in range(1, p):
                cd[:, t + (p + 1) * s] = self.cell_offset + np.arange(N) * (p - 1) ** 2 + (t - 1) + (p - 1) * (s - 1)
        self.cell_dofs = cd

    def _rt(self, broken):
        mesh, q = self.mesh, self.degree
        self.element = raviart_thomas(q)
        N, nloc = mesh.n_cells, self.element.ndofs
        if broken:
            self.n_dofs = N * nloc
            self.cell_dofs = np.arange(N * nloc).reshape(N, nloc)
            return
        # conforming: q DOFs per face entity, interior per cell; fine halves are slaves
        nF = mesh.n_faces
        nint = nloc - 4 * q
        cd = np.empty((N, nloc), dtype=np.int64)
        for d in range(4):
            cd[:, d * q:(d + 1) * q] = mesh.cell_face[:, d][:, None] * q + np.arange(q)
        cd[:, 4 * q:] = nF * q + np.arange(N)[:, None] * nint + np.arange(nint)
        self.n_dofs = nF * q + N * nint
        self.cell_dofs = cd

    # -- Lagrange helpers ------------------------------------------------------
    def dof_coordinates(self):
        """Physical coordinates of every Lagrange DOF."""
        assert self.family == "lagrange"
        pts = self.mesh.cell_points(self.element.nodes)
        out = np.empty((self.n_dofs, 2))
        out[self.cell_dofs.ravel()] = pts.reshape(-1, 2)
        return out

    def face_dofs(self, faces):
        """(nf, p+1) Lagrange DOFs along faces in increasing parameter."""
        mesh, p = self.mesh, self.degree
        fv = mesh.face_vertices[faces]
        inner = self.face_offset + faces[:, None] * (p - 1) + np.arange(p - 1)
        return np.column_stack([fv[:, 0], inner, fv[:, 1]])

    def hanging_constraints(self):
        mesh, p = self.mesh, self.degree
        if self.family != "lagrange":
            return self._rt_constraints()
        coarse = np.flatnonzero(~mesh.face_is_fine)
        if not coarse.size:
            return ConstraintSet.empty(self.n_dofs)
        masters = self.face_dofs(coarse)
        c0, c1 = mesh.face_children[coarse, 0], mesh.face_children[coarse, 1]
        hv = mesh.face_vertices[c0, 1]
        inner0 = self.face_offset + c0[:, None] * (p - 1) + np.arange(p - 1)
        inner1 = self.face_offset + c1[:, None] * (p - 1) + np.arange(p - 1)
        slaves = np.column_stack([inner0, hv, inner1])
        params = np.concatenate([np.arange(1, p) / (2 * p), [0.5], 0.5 + np.arange(1, p) / (2 * p)])
        W = self.element.basis_1d(params)  # (nslaves, p+1)
        ns = slaves.shape[1]
        s = slaves.ravel()
        m = np.repeat(masters[:, None, :], ns, axis=1).reshape(-1, p + 1)
        w = np.broadcast_to(W, (len(coarse), ns, p + 1)).reshape(-1, p + 1)
        keep = np.abs(w) > 1e-14
        order = np.argsort(s)
        s, m, w, keep = s[order], m[order], w[order], keep[order]
        counts = keep.sum(axis=1)
        return ConstraintSet(self.n_dofs, s, np.r_[0, np.cumsum(counts)], m[keep], w[keep], np.zeros(len(s)))

    def _rt_constraints(self):
        if self.family == "broken_rt":
            return ConstraintSet.empty(self.n_dofs)
        from .elements import half_restriction
        mesh, q = self.mesh, self.degree
        coarse = np.flatnonzero(~mesh.face_is_fine)
        slaves, masters, weights, ptr = [], [], [], [0]
        for f in coarse:
            for o in (0, 1):
                R = 0.5 * half_restriction(q, o)  # fine moment = 1/2 R coarse moment
                child = mesh.face_children[f, o]
                for k in range(q):
                    slaves.append(child * q + k)
                    masters.extend(f * q + np.arange(q))
                    weights.extend(R[k])
                    ptr.append(len(masters))
        if not slaves:
            return ConstraintSet.empty(self.n_dofs)
        return ConstraintSet(self.n_dofs, np.array(slaves), np.array(ptr), np.array(masters),
                             np.array(weights), np.zeros(len(slaves)))

    def dirichlet_constraints(self, g=None):
        """Boundary DOFs on Dirichlet faces, valued by nodal interpolation of g."""
        assert self.family == "lagrange"
        mesh = self.mesh
        faces = np.flatnonzero(mesh.face_marker == DIRICHLET)
        dofs = np.unique(self.face_dofs(faces).ravel()) if faces.size else np.zeros(0, dtype=np.int64)
        vals = np.zeros(len(dofs))
        if g is not None and len(dofs):
            xy = self.dof_coordinates()[dofs]
            vals = np.asarray(g(xy[:, 0], xy[:, 1]), dtype=float) * np.ones(len(dofs))
        return ConstraintSet(self.n_dofs, dofs, np.zeros(len(dofs) + 1, dtype=np.int64),
                             np.zeros(0, dtype=np.int64), np.zeros(0), vals)


def distribute_dofs(mesh, family, degree):
    return DofMap(mesh, family, degree)


def hanging_constraints(dofmap):
    return dofmap.hanging_constraints()


def apply_constraints(constraints, values):
    return constraints.distribute(values)


@dataclass
class ScalarField:
    """A Lagrange field stored as the full DOF vector (constraints resolved)."""

    dofmap: DofMap
    values: np.ndarray

    @property
    def mesh(self):
        return self.dofmap.mesh

    @property
    def degree(self):
        return self.dofmap.degree

    def cell_values(self):
        return self.values[self.dofmap.cell_dofs]

    def evaluate(self, points):
        """Values and physical gradients at arbitrary points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        cells = self.mesh.locate(pts)
        if (cells < 0).any():
            raise ValueError("point outside the domain")
        h = self.mesh.cell_h[cells]
        ref = (pts - self.mesh.cell_origin[cells]) / h[:, None]
        el = self.dofmap.element
        loc = self.cell_values()[cells]
        val = np.einsum("ni,ni->n", el.tabulate(ref), loc)
        grad = np.einsum("nic,ni->nc", el.gradients(ref), loc) / h[:, None]
        return val, grad


def evaluate_field(field, point):
    val, grad = field.evaluate(point)
    return val[0], grad[0]


def export_field(field, path):
    """Plain text: one line per DOF with coordinates and value."""
    xy = field.dofmap.dof_coordinates()
    with open(path, "w") as fh:
        fh.write(f"# lagrange degree {field.degree} dofs {len(field.values)}\n")
        for i, ((x, y), v) in enumerate(zip(xy, field.values)):
            fh.write(f"{i} {x:.17g} {y:.17g} {v:.17g}\n")


@dataclass
class BrokenFluxField:
    """Cellwise RT_q coefficients of a flux (reference DOFs, w = what / h)."""

    mesh: object
    q: int
    coeffs: np.ndarray  # (N, ndofs_rt)

    def __add__(self, other):
        return BrokenFluxField(self.mesh, self.q, self.coeffs + other.coeffs)

    def __sub__(self, other):
        return BrokenFluxField(self.mesh, self.q, self.coeffs - other.coeffs)

    def evaluate_cells(self, ref_pts):
        """Physical flux values at reference points of every cell: (N, n, 2)."""
        phi = raviart_thomas(self.q).tabulate(ref_pts)
        return np.einsum("nic,Ki->Knc", phi, self.coeffs) / self.mesh.cell_h[:, None, None]

    def normal_moments(self, face, side=0):
        """Outward-normal trace moments (physical, against L_k) from one side of a fine face."""
        mesh, q = self.mesh, self.q
        from .elements import OUTWARD, half_restriction
        c, d, o = mesh.face_cells[face, side], mesh.face_dir[face, side], mesh.face_half[face, side]
        dof = self.coeffs[c, d * q:(d + 1) * q] * OUTWARD[d]
        if o >= 0:
            dof = 0.5 * half_restriction(q, o) @ dof
        return dof
