"""Reference-element machinery on the unit square [0,1]^2.

Two families live here: tensor-product Lagrange elements Q^p with
equispaced nodes and Raviart-Thomas elements RT_q whose degrees of freedom
are normal-trace moments against orthonormal Legendre polynomials on each
face plus interior moments.  Cells of a mesh are axis-aligned squares, so a
cell of size h with lower-left corner x0 maps through x = x0 + h*xhat and
the contravariant Piola transform reduces to w = what / h.

Lagrange local numbering is lexicographic: node (i, j) at (i/p, j/p) has
index i + (p+1)*j.  Corners are therefore ordered (0,0), (1,0), (0,1), (1,1).
Faces are ordered W, E, S, N; W/E are parametrized by y, S/N by x.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg

WEST, EAST, SOUTH, NORTH = 0, 1, 2, 3
FACE_AXIS = (0, 0, 1, 1)  # normal axis of each face
FACE_SIDE = (0, 1, 0, 1)  # coordinate value of the face along its normal axis
OUTWARD = (-1.0, 1.0, -1.0, 1.0)
# corners (tensor order) touching each face, in increasing face parameter
FACE_CORNERS = ((0, 2), (1, 3), (0, 1), (2, 3))


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray


@lru_cache(maxsize=None)
def gauss_1d(k):
    """k-point Gauss-Legendre rule on [0, 1]."""
    if k < 1:
        raise ValueError("quadrature needs at least one point")
    x, w = npleg.leggauss(k)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w)


@lru_cache(maxsize=None)
def tensor_gauss(k):
    """k x k tensor Gauss rule on the unit square; x varies fastest."""
    r = gauss_1d(k)
    X, Y = np.meshgrid(r.points, r.points)
    W = np.outer(r.weights, r.weights)
    return QuadratureRule(np.column_stack([X.ravel(), Y.ravel()]), W.ravel())


def default_quadrature(p, q):
    return tensor_gauss(p + q + 1)


def legendre(k, t, deriv=0):
    """Orthonormal shifted Legendre L_0..L_{k-1} on [0,1]; shape (len(t), k)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty((t.size, k))
    for n in range(k):
        c = np.zeros(n + 1)
        c[n] = np.sqrt(2 * n + 1)
        if deriv:
            c = npleg.legder(c, deriv) * 2.0**deriv
        out[:, n] = npleg.legval(2.0 * t - 1.0, c) if c.size else 0.0
    return out


def legendre_2d(q, pts, deriv=(0, 0)):
    """Tensor basis P_ab(x, y) = L_a(x) L_b(y), a, b < q, index a + q*b."""
    lx = legendre(q, pts[:, 0], deriv[0])
    ly = legendre(q, pts[:, 1], deriv[1])
    return (lx[:, None, :] * ly[:, :, None]).reshape(len(pts), q * q)


@lru_cache(maxsize=None)
def half_restriction(q, o):
    """R[k, l] = int_0^1 L_l((s+o)/2) L_k(s) ds: coefficients of a face
    polynomial restricted to half o (0 = lower, 1 = upper)."""
    r = gauss_1d(q + 1)
    fine = legendre(q, r.points)
    coarse = legendre(q, 0.5 * (r.points + o))
    return (fine * r.weights[:, None]).T @ coarse


class LagrangeElement:
    """Tensor-product Q^p element with equispaced nodes."""

    def __init__(self, degree):
        if degree < 1:
            raise ValueError("Lagrange degree must be >= 1")
        self.degree = p = degree
        self.nodes_1d = np.linspace(0.0, 1.0, p + 1)
        V = np.vander(self.nodes_1d, p + 1, increasing=True)
        self._coef = np.linalg.inv(V)  # column i: monomial coefficients of l_i
        X, Y = np.meshgrid(self.nodes_1d, self.nodes_1d)
        self.nodes = np.column_stack([X.ravel(), Y.ravel()])
        self.ndofs = (p + 1) ** 2

    def basis_1d(self, t, deriv=0):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        p = self.degree
        coef = self._coef
        for _ in range(deriv):
            coef = (np.arange(1, coef.shape[0])[:, None] * coef[1:])
        if coef.shape[0] == 0:
            return np.zeros((t.size, p + 1))
        powers = t[:, None] ** np.arange(coef.shape[0])
        return powers @ coef

    def tabulate(self, pts, deriv=(0, 0)):
        """Values of all basis functions (or a partial derivative), shape (n, ndofs)."""
        pts = np.atleast_2d(pts)
        bx = self.basis_1d(pts[:, 0], deriv[0])
        by = self.basis_1d(pts[:, 1], deriv[1])
        return (bx[:, None, :] * by[:, :, None]).reshape(len(pts), self.ndofs)

    def gradients(self, pts):
        return np.stack([self.tabulate(pts, (1, 0)), self.tabulate(pts, (0, 1))], axis=-1)

    def local_face_nodes(self, face):
        """Local node indices along a face in increasing face parameter."""
        p = self.degree
        idx = np.arange(p + 1)
        if face == WEST:
            return idx * (p + 1)
        if face == EAST:
            return idx * (p + 1) + p
        if face == SOUTH:
            return idx
        return p * (p + 1) + idx


def lagrange_eval(elem, point):
    """Basis values and reference gradients at a single point."""
    pt = np.asarray(point, dtype=float).reshape(1, 2)
    return elem.tabulate(pt)[0], elem.gradients(pt)[0]


class RaviartThomasElement:
    """RT_q on the unit square (q >= 1, lowest order q = 1)."""

    def __init__(self, q):
        if q < 1:
            raise ValueError("RT degree must be >= 1")
        self.degree = q
        # monomials: x-component x^a y^b (a <= q, b < q); y-component a < q, b <= q
        self._mono = [(0, a, b) for b in range(q) for a in range(q + 1)]
        self._mono += [(1, a, b) for b in range(q + 1) for a in range(q)]
        self.ndofs = len(self._mono)
        V = self._functionals(self._mono_fields)
        self.dof_matrix_condition = np.linalg.cond(V)
        self._C = np.linalg.inv(V)

    # -- monomial evaluation -------------------------------------------------
    def _mono_fields(self, pts):
        x, y = pts[:, 0], pts[:, 1]
        out = np.zeros((len(pts), len(self._mono), 2))
        for m, (c, a, b) in enumerate(self._mono):
            out[:, m, c] = x**a * y**b
        return out

    def _mono_div(self, pts):
        x, y = pts[:, 0], pts[:, 1]
        out = np.zeros((len(pts), len(self._mono)))
        for m, (c, a, b) in enumerate(self._mono):
            if c == 0 and a > 0:
                out[:, m] = a * x ** (a - 1) * y**b
            elif c == 1 and b > 0:
                out[:, m] = b * x**a * y ** (b - 1)
        return out

    def _functionals(self, field, nq=None):
        """Apply all DOF functionals to a vector field.

        ``field(pts)`` returns shape (n, 2) or (n, m, 2); result (ndofs, m).
        """
        q = self.degree
        nq = nq or q + 3
        r1 = gauss_1d(nq)
        s, w = r1.points, r1.weights
        Ls = legendre(q, s)
        rows = []
        for f in range(4):
            ax = FACE_AXIS[f]
            pts = np.empty((nq, 2))
            pts[:, ax] = FACE_SIDE[f]
            pts[:, 1 - ax] = s
            vals = np.asarray(field(pts))
            vals = vals.reshape(nq, -1, 2)[:, :, ax]
            rows.append((Ls * w[:, None]).T @ vals)
        r2 = tensor_gauss(nq)
        vals = np.asarray(field(r2.points)).reshape(len(r2.weights), -1, 2)
        wx = legendre_2d(q, r2.points, (1, 0))  # d/dx P_ab
        wy = legendre_2d(q, r2.points, (0, 1))
        ia = [a + q * b for b in range(q) for a in range(1, q)]
        ib = [a + q * b for b in range(1, q) for a in range(q)]
        rows.append((wx[:, ia] * r2.weights[:, None]).T @ vals[:, :, 0])
        rows.append((wy[:, ib] * r2.weights[:, None]).T @ vals[:, :, 1])
        return np.vstack(rows)

    # -- public --------------------------------------------------------------
    def face_dofs(self, face):
        q = self.degree
        return np.arange(face * q, (face + 1) * q)

    def tabulate(self, pts):
        """Basis vector values, shape (n, ndofs, 2)."""
        return np.einsum("nmc,mj->njc", self._mono_fields(np.atleast_2d(pts)), self._C)

    def divergence(self, pts):
        return self._mono_div(np.atleast_2d(pts)) @ self._C

    def interpolate(self, field, nq=None):
        """Canonical interpolant: DOF values of ``field`` (vectorized callable)."""
        out = self._functionals(field, nq)
        return out[:, 0] if out.shape[1] == 1 else out


def rt_interpolate(elem, field, nq=None):
    return elem.interpolate(field, nq)


@lru_cache(maxsize=None)
def lagrange(p):
    return LagrangeElement(p)


@lru_cache(maxsize=None)
def raviart_thomas(q):
    return RaviartThomasElement(q)


class ReferenceOps:
    """Precomputed reference matrices for a primal degree p and flux degree q.

    All matrices are scale-free: with w = what/h, cell integrals of flux
    products, divergence moments against P_ab and flux-gradient pairings
    depend only on reference quantities.
    """

    def __init__(self, p, q):
        self.p, self.q = p, q
        self.lag = lagrange(p)
        self.rt = raviart_thomas(q)
        nq = max(p, q) + 3
        rule = tensor_gauss(nq)
        X, W = rule.points, rule.weights
        phi = self.rt.tabulate(X)
        # M_mn[i, j] = int phi_i^m phi_j^n
        self.M_comp = np.einsum("q,qim,qjn->mnij", W, phi, phi)
        self.M = self.M_comp[0, 0] + self.M_comp[1, 1]
        P = legendre_2d(q, X)
        self.D = (P * W[:, None]).T @ self.rt.divergence(X)
        self.cell_poly = P  # for reuse by callers that share the rule
        grad = self.lag.gradients(X)
        self.K_comp = np.einsum("q,qim,qjn->mnij", W, grad, grad)
        self.K = self.K_comp[0, 0] + self.K_comp[1, 1]
        lagv = self.lag.tabulate(X)
        self.mass = np.einsum("q,qi,qj->ij", W, lagv, lagv)
        self.lag_cell_moments = (P * W[:, None]).T @ lagv  # int chi_j P_ab
        # second derivatives projected on Q^{q-1}: Lap_mn = int d_m d_n chi_j P_ab
        d2 = {}
        for m in range(2):
            for n in range(2):
                der = [0, 0]
                der[m] += 1
                der[n] += 1
                d2[m, n] = (P * W[:, None]).T @ self.lag.tabulate(X, tuple(der))
        self.Lap_comp = np.array([[d2[0, 0], d2[0, 1]], [d2[1, 0], d2[1, 1]]])
        self.Lap = d2[0, 0] + d2[1, 1]
        # normal-derivative traces: T[f, n] (q x nQ) coefficients in L_k of d_n chi on face f
        r1 = gauss_1d(nq)
        Ls = legendre(q, r1.points) * r1.weights[:, None]
        T = np.zeros((4, 2, q, self.lag.ndofs))
        for f in range(4):
            pts = self.face_points(f, r1.points)
            g = self.lag.gradients(pts)
            for n in range(2):
                T[f, n] = Ls.T @ g[:, :, n]
        self.T = T
        # RT interpolant of e_m * d_n chi_j
        Ig = np.zeros((2, 2, self.rt.ndofs, self.lag.ndofs))
        for m in range(2):
            for n in range(2):
                def fld(pts, m=m, n=n):
                    out = np.zeros((len(pts), self.lag.ndofs, 2))
                    out[:, :, m] = self.lag.gradients(pts)[:, :, n]
                    return out
                Ig[m, n] = self.rt.interpolate(fld)
        self.Igrad_comp = Ig
        self.Igrad = Ig[0, 0] + Ig[1, 1]
        self.R = (half_restriction(q, 0), half_restriction(q, 1))
        # psi-weighted projections: corner c bilinear hat times P_ab P_a'b'
        q1 = lagrange(1).tabulate(X)
        self.Gpsi = np.einsum("q,qc,qi,qj->cij", W, q1, P, P)
        Lf = legendre(q, r1.points)
        lam = np.column_stack([1.0 - r1.points, r1.points])
        self.Hpsi = np.einsum("s,se,sk,sl->ekl", r1.weights, lam, Lf, Lf)

    @staticmethod
    def face_points(f, s):
        pts = np.empty((len(s), 2))
        ax = FACE_AXIS[f]
        pts[:, ax] = FACE_SIDE[f]
        pts[:, 1 - ax] = s
        return pts

    def mass_for(self, Ainv):
        """RT mass weighted by A^{-1}; Ainv shape (2,2) or (N,2,2)."""
        return np.einsum("...mn,mnij->...ij", Ainv, self.M_comp)

    def igrad_for(self, A):
        return np.einsum("...mn,mnij->...ij", A, self.Igrad_comp)

    def stiffness_for(self, A):
        return np.einsum("...mn,mnij->...ij", A, self.K_comp)

    def lap_for(self, A):
        return np.einsum("...mn,mnij->...ij", A, self.Lap_comp)

    def flux_trace_for(self, A, f):
        """Coefficients of (A grad chi) . e_axis on face f; shape (..., q, nQ)."""
        ax = FACE_AXIS[f]
        return np.einsum("...n,nkj->...kj", A[..., ax, :], self.T[f])


@lru_cache(maxsize=None)
def reference_ops(p, q):
    return ReferenceOps(p, q)


@lru_cache(maxsize=None)
def flux_gradient_pairing(q, m):
    """G[i, j] = int phi_i . grad chi_j for RT_q against Q^m (scale-free)."""
    rt, lag = raviart_thomas(q), lagrange(m)
    rule = tensor_gauss(max(q, m) + 3)
    return np.einsum("q,qic,qjc->ij", rule.weights, rt.tabulate(rule.points), lag.gradients(rule.points))
