"""Conforming Galerkin solves and the global mixed flux solve."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .elements import OUTWARD, gauss_1d, legendre, legendre_2d, reference_ops, tensor_gauss
from .linalg import SolverError, cg_solve, direct_solve
from .mesh import DIRICHLET, NEUMANN
from .space import BrokenFluxField, DofMap, ScalarField


class MetricTensor:
    """Symmetric positive definite coefficient A(x)."""

    def __init__(self, func=None, constant=None):
        if constant is not None:
            c = np.asarray(constant, dtype=float)
            if c.shape != (2, 2) or not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
                raise ValueError("metric must be symmetric positive definite")
            self.constant = c
            self.func = None
        else:
            self.constant = None
            self.func = func
        self.is_identity = self.constant is not None and np.array_equal(self.constant, np.eye(2))
        self.is_cellwise_constant = self.constant is not None

    @classmethod
    def identity(cls):
        return cls(constant=np.eye(2))

    def __call__(self, x, y):
        if self.constant is not None:
            return np.broadcast_to(self.constant, np.shape(x) + (2, 2))
        return np.asarray(self.func(x, y))

    def cell_values(self, mesh):
        c = mesh.cell_origin + 0.5 * mesh.cell_h[:, None]
        return np.array(self(c[:, 0], c[:, 1]), dtype=float)


def _quad_points(k):
    return max(k, 1)


@dataclass
class RightHandSide:
    """Load F(v) = int f v + int_{Gamma_N} g_N v."""

    f: object
    g_N: object = None
    quad_points: int = 6

    def cell_values(self, mesh, ref_pts):
        xy = mesh.cell_points(ref_pts)
        return np.asarray(self.f(xy[..., 0], xy[..., 1]), dtype=float) * np.ones(xy.shape[:2])

    def load(self, dofmap):
        mesh, el = dofmap.mesh, dofmap.element
        rule = tensor_gauss(_quad_points(max(self.quad_points, dofmap.degree + 2)))
        fv = self.cell_values(mesh, rule.points)
        loc = (fv * rule.weights) @ el.tabulate(rule.points) * mesh.cell_h[:, None] ** 2
        F = np.bincount(dofmap.cell_dofs.ravel(), loc.ravel(), minlength=dofmap.n_dofs)
        if self.g_N is not None:
            faces = np.flatnonzero(mesh.face_marker == NEUMANN)
            if faces.size:
                r = gauss_1d(self.quad_points)
                gv = face_values(mesh, faces, self.g_N, r.points)
                b1 = el.basis_1d(r.points)
                loc = (gv * r.weights) @ b1 * mesh.face_length[faces, None]
                np.add.at(F, dofmap.face_dofs(faces), loc)
        return F

    def project(self, mesh, q):
        """Cellwise L2 projection onto Q^{q-1}: Legendre coefficients (N, q^2)."""
        rule = tensor_gauss(max(self.quad_points, q + 2))
        fv = self.cell_values(mesh, rule.points)
        return (fv * rule.weights) @ legendre_2d(q, rule.points)

    def neumann_coefficients(self, mesh, faces, q):
        if self.g_N is None or not len(faces):
            return np.zeros((len(faces), q))
        r = gauss_1d(max(self.quad_points, q + 2))
        gv = face_values(mesh, faces, self.g_N, r.points)
        return (gv * r.weights) @ legendre(q, r.points)


def face_points(mesh, faces, s):
    """Physical points at parameters s on faces: (nf, ns, 2)."""
    v0 = mesh.vertices[mesh.face_vertices[faces, 0]]
    ax = mesh.face_axis[faces]
    t = np.zeros((len(faces), 2))
    t[np.arange(len(faces)), 1 - ax] = 1.0
    return v0[:, None, :] + (mesh.face_length[faces, None, None] * s[None, :, None]) * t[:, None, :]


def face_values(mesh, faces, func, s):
    xy = face_points(mesh, faces, s)
    return np.asarray(func(xy[..., 0], xy[..., 1]), dtype=float) * np.ones(xy.shape[:2])


def assemble_stiffness(dofmap, A):
    mesh = dofmap.mesh
    p = dofmap.degree
    if A.is_cellwise_constant:
        ops = reference_ops(p, p + 1)
        Kloc = np.broadcast_to(ops.stiffness_for(A.constant), (mesh.n_cells,) + ops.K.shape)
    else:
        rule = tensor_gauss(p + 3)
        el = dofmap.element
        g = el.gradients(rule.points)
        xy = mesh.cell_points(rule.points)
        Av = A(xy[..., 0], xy[..., 1])
        Kloc = np.einsum("q,qim,Kqmn,qjn->Kij", rule.weights, g, Av, g)
    cd = dofmap.cell_dofs
    n = cd.shape[1]
    rows = np.repeat(cd, n, axis=1).ravel()
    cols = np.tile(cd, (1, n)).ravel()
    return sp.csr_matrix((np.ascontiguousarray(Kloc).ravel(), (rows, cols)), shape=(dofmap.n_dofs,) * 2)


def _solve_constrained(dofmap, A, F, cons, solver, tol):
    P, b = cons.prolongation()
    K = assemble_stiffness(dofmap, A)
    Kf = (P.T @ K @ P).tocsr()
    rhs = P.T @ (F - K @ b)
    has_dirichlet = (dofmap.mesh.face_marker == DIRICHLET).any()
    if not has_dirichlet:
        # pure Neumann: zero-mean solution via a bordered system
        if abs(F.sum()) > 1e-10 * max(1.0, np.abs(F).sum()):
            raise SolverError("incompatible data for the pure Neumann problem")
        ones = np.asarray(P.sum(axis=0)).ravel()
        Kb = sp.bmat([[Kf, ones[:, None]], [ones[None, :], None]]).tocsr()
        x = direct_solve(Kb, np.r_[rhs, 0.0])[:-1]
    elif solver == "direct":
        x = direct_solve(Kf, rhs)
    elif solver == "cg":
        x, _ = cg_solve(Kf, rhs, tol=tol)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    u = P @ x + b
    if not np.all(np.isfinite(u)):
        raise SolverError("solution contains non-finite values")
    return ScalarField(dofmap, u)


def solve_primal(mesh, p, A, rhs, g_D=None, solver="cg", tol=1e-12):
    """Q^p Galerkin approximation of -div A grad u = f with u = g_D on Gamma_D."""
    dm = DofMap(mesh, "lagrange", p)
    cons = dm.hanging_constraints().merged(dm.dirichlet_constraints(g_D))
    return _solve_constrained(dm, A, rhs.load(dm), cons, solver, tol)


def solve_dual(mesh, p, A, goal, solver="cg", tol=1e-12):
    """Q^p approximation of the adjoint problem a(v, z) = J(v), z = 0 on Gamma_D."""
    dm = DofMap(mesh, "lagrange", p)
    cons = dm.hanging_constraints().merged(dm.dirichlet_constraints(None))
    return _solve_constrained(dm, A, goal.load(dm), cons, solver, tol)


# -- global mixed solve via hybridization ------------------------------------

def _cell_pieces(mesh):
    """Per cell: list of fine-face pieces (dir, half, face); grouped by split pattern."""
    split = ~mesh.face_is_fine[mesh.cell_face]
    pattern = split @ (1 << np.arange(4))
    return split, pattern


def _piece_operator(q, split_row, ops):
    """Outward trace-moment operator rows for a cell with a given split pattern."""
    rows, desc = [], []
    nrt = ops.rt.ndofs
    for d in range(4):
        sel = np.zeros((q, nrt))
        sel[:, d * q:(d + 1) * q] = np.eye(q) * OUTWARD[d]
        if split_row[d]:
            for o in (0, 1):
                rows.append(0.5 * ops.R[o] @ sel)
                desc.append((d, o))
        else:
            rows.append(sel)
            desc.append((d, -1))
    return np.vstack(rows), desc


def _piece_faces(mesh, cells, desc):
    out = np.empty((len(cells), len(desc)), dtype=np.int64)
    for j, (d, o) in enumerate(desc):
        f = mesh.cell_face[cells, d]
        out[:, j] = f if o < 0 else mesh.face_children[f, o]
    return out


def solve_global_mixed_flux(mesh, q, A, rhs, g_D=None, solver="direct"):
    """Mixed RT_q flux: div sigma = -F_h, sigma.n = g_N on Gamma_N, minimizing
    ||sigma||^2_{A^-1} / 2 - <sigma.n, g_D>_{Gamma_D} (the plain minimum norm
    when g_D vanishes).

    The problem is hybridized: cell unknowns are eliminated locally and
    a symmetric positive definite system is solved for face multipliers.
    Returns the flux as a BrokenFluxField (conforming up to round-off).
    """
    if not A.is_cellwise_constant:
        raise ValueError("flux reconstructions need a cellwise constant metric")
    ops = reference_ops(max(q - 1, 1), q)
    N, nrt = mesh.n_cells, ops.rt.ndofs
    Ainv = np.linalg.inv(A.constant)
    M = ops.mass_for(Ainv)
    D = ops.D
    nq2 = D.shape[0]
    Kl = np.block([[M, D.T], [D, np.zeros((nq2, nq2))]])
    inv = np.linalg.inv(Kl)
    X, Y = inv[:nrt, :nrt], inv[:nrt, nrt:]
    cF = rhs.project(mesh, q)
    g = -(mesh.cell_h ** 2)[:, None] * cF  # moment units
    nfine = mesh.n_fine_faces
    marker = mesh.face_marker[:nfine]
    mu_index = np.full(nfine, -1, dtype=np.int64)
    active = np.flatnonzero(marker != DIRICHLET)
    mu_index[active] = np.arange(len(active))
    nmu = len(active) * q
    bvec = np.zeros(nmu)
    neu = np.flatnonzero(marker == NEUMANN)
    if neu.size:
        coef = rhs.neumann_coefficients(mesh, neu, q) * mesh.face_length[neu, None]
        bvec[(mu_index[neu][:, None] * q + np.arange(q)).ravel()] += coef.ravel()
    lin = np.zeros((N, nrt))
    dfaces = np.flatnonzero(marker == DIRICHLET)
    if g_D is not None and dfaces.size:
        r1 = gauss_1d(max(rhs.quad_points, q + 2))
        gm = (face_values(mesh, dfaces, g_D, r1.points) * r1.weights) @ legendre(q, r1.points)
        c, d = mesh.face_cells[dfaces, 0], mesh.face_dir[dfaces, 0]
        cols = d[:, None] * q + np.arange(q)
        np.add.at(lin, (np.repeat(c, q), cols.ravel()), (gm * np.asarray(OUTWARD)[d][:, None]).ravel())
    split, pattern = _cell_pieces(mesh)
    Srows, Scols, Svals = [], [], []
    groups = []
    for pat in np.unique(pattern):
        cells = np.flatnonzero(pattern == pat)
        O, desc = _piece_operator(q, split[cells[0]], ops)
        faces = _piece_faces(mesh, cells, desc)
        idx = mu_index[faces]  # (nc, npieces)
        dof = np.where(idx[:, :, None] >= 0, idx[:, :, None] * q + np.arange(q), -1).reshape(len(cells), -1)
        Sloc = O @ X @ O.T
        m = dof.shape[1]
        r = np.repeat(dof, m, axis=1).ravel()
        c = np.tile(dof, (1, m)).ravel()
        v = np.tile(Sloc.ravel(), len(cells))
        keep = (r >= 0) & (c >= 0)
        Srows.append(r[keep]), Scols.append(c[keep]), Svals.append(v[keep])
        contrib = g[cells] @ (O @ Y).T + lin[cells] @ (O @ X).T  # (nc, m)
        ok = dof >= 0
        np.add.at(bvec, dof[ok], -contrib[ok])
        groups.append((cells, O, dof))
    S = sp.csr_matrix((np.concatenate(Svals), (np.concatenate(Srows), np.concatenate(Scols))), shape=(nmu, nmu))
    if not (marker == DIRICHLET).any():
        # flux determined up to nothing, but multipliers up to a constant: pin one
        S = S.tolil()
        S[0, :] = 0.0
        S[0, 0] = 1.0
        S = S.tocsr()
        bvec[0] = 0.0
    if nmu:
        mu = direct_solve(S, bvec) if solver == "direct" else cg_solve(S, bvec)[0]
    else:
        mu = np.zeros(0)
    coeffs = np.empty((N, nrt))
    for cells, O, dof in groups:
        muc = np.where(dof >= 0, mu[np.maximum(dof, 0)] if nmu else 0.0, 0.0)
        coeffs[cells] = (muc @ O + lin[cells]) @ X.T + g[cells] @ Y.T
    return BrokenFluxField(mesh, q, coeffs)
