"""Linear solvers: preconditioned CG, sparse direct, dense minimum-norm saddle points."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """A solver failed to meet its tolerance or met an inconsistent system."""


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool


def cg_solve(A, b, tol=1e-12, maxiter=None, x0=None, jacobi=True, callback=None):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ||r|| <= tol * ||b||.  Raises SolverError when the iteration
    limit is hit, reporting the residual reached.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    n = len(b)
    maxiter = maxiter or max(10 * n, 100)
    dinv = 1.0 / A.diagonal() if jacobi else np.ones(n)
    if jacobi and not np.all(np.isfinite(dinv)):
        raise SolverError("zero on the diagonal; Jacobi preconditioner undefined")
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), CGInfo(0, 0.0, True)
    z = dinv * r
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r)
    for it in range(1, maxiter + 1):
        if res <= tol * bnorm:
            return x, CGInfo(it - 1, res / bnorm, True)
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError(f"matrix is not positive definite (p.Ap = {pAp:.3e})")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if callback is not None:
            callback(x)
        res = np.linalg.norm(r)
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if res <= tol * bnorm:
        return x, CGInfo(maxiter, res / bnorm, True)
    raise SolverError(f"CG did not converge in {maxiter} iterations (relative residual {res / bnorm:.3e})")


def direct_solve(A, b):
    """Sparse LU solve."""
    lu = spla.splu(sp.csc_matrix(A))
    x = lu.solve(np.asarray(b, dtype=float))
    if not np.all(np.isfinite(x)):
        raise SolverError("direct solve produced non-finite values")
    return x


@dataclass
class SaddleOperator:
    """Minimum-norm solver for min x^T M x / 2 subject to B x = g.

    ``apply`` returns x = T g for consistent g.  ``nullspace`` spans the left
    nullspace of B (compatibility conditions on g).
    """

    T: np.ndarray
    nullspace: np.ndarray
    rank: int

    def apply(self, g):
        return g @ self.T.T


def saddle_operator(M, B, expected_nullity=None, rtol=1e-10):
    M = np.asarray(M, dtype=float)
    B = np.asarray(B, dtype=float)
    L = np.linalg.cholesky(M)
    BL = np.linalg.solve(L, B.T)  # L^{-1} B^T
    S = BL.T @ BL  # B M^{-1} B^T
    w, V = np.linalg.eigh(S)
    cut = rtol * max(w.max(), 1.0) if w.size else 0.0
    keep = w > cut
    nullity = int((~keep).sum())
    if expected_nullity is not None and nullity != expected_nullity:
        raise SolverError(f"constraint matrix has nullity {nullity}, expected {expected_nullity}")
    Sp = (V[:, keep] / w[keep]) @ V[:, keep].T
    Minv_BT = np.linalg.solve(L.T, BL)
    return SaddleOperator(Minv_BT @ Sp, V[:, ~keep], int(keep.sum()))


def dense_saddle_solve(M, B, g, expected_nullity=None, compat_tol=1e-8):
    """Minimum-energy x with B x = g; g must satisfy the compatibility conditions."""
    op = saddle_operator(M, B, expected_nullity)
    g = np.asarray(g, dtype=float)
    if op.nullspace.size:
        defect = np.abs(op.nullspace.T @ g).max()
        if defect > compat_tol * max(1.0, np.linalg.norm(g)):
            raise SolverError(f"incompatible constraint data (defect {defect:.3e})")
    return op.apply(g)
