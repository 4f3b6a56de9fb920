"""Error estimators, effectivity indices and the higher-order dual weight z*.

Fluxes are BrokenFluxFields storing w = A rho; the energy product of two
corrections is <rho, pi>_A = int w_rho . A^{-1} w_pi, and pairings with
gradients are int w . grad v.  Both are scale-free per cell.
"""

from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.sparse as sp

from .elements import flux_gradient_pairing, lagrange, reference_ops
from .flux import compute_residual, face_trace
from .elements import gauss_1d, legendre, legendre_2d, tensor_gauss
from .mesh import patch_table
from .space import DofMap, ScalarField

log = logging.getLogger(__name__)

KINDS = ("energy", "rho_varpi", "rho_tau", "I_star", "II_star", "DWR_star", "CS_naive", "CS_better")


@dataclass
class EstimatorReport:
    """Global value and per-cell indicators of one estimator.

    For ``energy`` the global value is the norm and the indicators are the
    squared local norms; ``total`` is then the squared norm.  For every
    other kind the global value is the signed sum of the indicators.
    """

    kind: str
    global_value: float
    per_cell: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.global_value**2 if self.kind == "energy" else self.global_value


def _same_mesh(*fields):
    meshes = {id(f.mesh) for f in fields}
    if len(meshes) != 1:
        raise ValueError("fields live on different meshes")
    return fields[0].mesh


def _metadata(mesh, **extra):
    return {"cells": int(mesh.n_cells), "hmin": float(mesh.cell_h.min()), **extra}


def energy_products(a, b, A):
    """Cellwise <a, b>_A for two broken fluxes."""
    _same_mesh(a, b)
    ops = reference_ops(max(a.q - 1, 1), a.q)
    M = ops.mass_for(np.linalg.inv(A.constant))
    return np.einsum("Ki,ij,Kj->K", a.coeffs, M, b.coeffs)


def energy_estimate(rho, A):
    """||rho||_A with rho = sigma_h - grad u_h; indicators ||rho||^2_K."""
    eta = energy_products(rho, rho, A)
    return EstimatorReport("energy", float(np.sqrt(eta.sum())), eta, _metadata(rho.mesh))


def efficiency_energy(eta, reference_error):
    """Squared ratio eta^2 / err^2 (both passed as norms)."""
    if reference_error <= 0:
        raise ValueError("reference error must be positive")
    return (eta / reference_error) ** 2


def _embed(z_h, m):
    """Cell values of a Q^p field in the nodal basis of Q^m (m >= p)."""
    E = z_h.dofmap.element.tabulate(lagrange(m).nodes)
    return z_h.cell_values() @ E.T


def gradient_pairing(w, v):
    """Cellwise int w . grad v for a broken flux and a Lagrange field."""
    _same_mesh(w, v)
    G = flux_gradient_pairing(w.q, v.degree)
    return np.einsum("Ki,ij,Kj->K", w.coeffs, G, v.cell_values())


def goal_estimates(rho, varpi, tau, z_h, zstar, A):
    """The four flux-based goal estimators, keyed by kind.

    rho and varpi are the primal and dual corrections, tau the dual
    equilibrated flux and zstar a higher-order approximation of the dual
    solution (degree 2p).
    """
    mesh = _same_mesh(rho, varpi, tau, z_h, zstar)
    G = flux_gradient_pairing(rho.q, zstar.degree)
    zs = zstar.cell_values()
    diff = zs - _embed(z_h, zstar.degree)
    cells = {
        "rho_varpi": energy_products(rho, varpi, A),
        "rho_tau": energy_products(rho, tau, A),
        "I_star": np.einsum("Ki,ij,Kj->K", rho.coeffs, G, zs),
        "II_star": np.einsum("Ki,ij,Kj->K", rho.coeffs, G, diff),
    }
    meta = _metadata(mesh)
    return {k: EstimatorReport(k, float(v.sum()), v, meta) for k, v in cells.items()}


def dwr_estimate(u_h, z_h, zstar, rhs, A, residual=None):
    """Dual weighted residual with weight e = z* - z_h.

    Cell terms int (F_h + div A grad u_h) e; each interior face term
    -int [A grad u_h . n] e is split evenly between its two cells, boundary
    (Neumann) faces go to their single cell.  F_h is the cellwise projection
    of the load used by the flux reconstruction, which makes the global value
    coincide with <rho, grad e>_A.
    """
    mesh = _same_mesh(u_h, z_h, zstar)
    r = residual if residual is not None else compute_residual(u_h, A, rhs)
    m = zstar.degree
    e_cells = zstar.cell_values() - _embed(z_h, m)
    el = lagrange(m)
    rule = tensor_gauss(max(r.q, m) + 2)
    P = legendre_2d(r.q, rule.points)
    ev = e_cells @ el.tabulate(rule.points).T
    eta = np.einsum("Ka,qa,Kq,q->K", r.cell, P, ev, rule.weights) * mesh.cell_h**2
    r1 = gauss_1d(max(r.q, m) + 2)
    nf = mesh.n_fine_faces
    faces = np.arange(nf)
    tr = face_trace(zstar, faces, r1.points, values=e_cells)
    jump = r.face @ legendre(r.q, r1.points).T
    fterm = (jump * tr) @ r1.weights * mesh.face_length[:nf]
    c0, c1 = mesh.face_cells[:nf, 0], mesh.face_cells[:nf, 1]
    inner = c1 >= 0
    np.add.at(eta, c0[inner], -0.5 * fterm[inner])
    np.add.at(eta, c1[inner], -0.5 * fterm[inner])
    np.add.at(eta, c0[~inner], -fterm[~inner])
    return EstimatorReport("DWR_star", float(eta.sum()), eta, _metadata(mesh))


def cs_bounds(rho, varpi, tau, A):
    """Cauchy-Schwarz bounds ||rho|| ||tau|| (naive) and ||rho|| ||varpi|| (better)."""
    r2 = energy_products(rho, rho, A)
    p2 = energy_products(varpi, varpi, A)
    t2 = energy_products(tau, tau, A)
    nr, npi, nt = np.sqrt(r2.sum()), np.sqrt(p2.sum()), np.sqrt(t2.sum())
    if npi > nt:
        log.info("||varpi|| = %.3e exceeds ||tau|| = %.3e", npi, nt)
    meta = _metadata(rho.mesh)
    naive = EstimatorReport("CS_naive", float(nr * nt), np.sqrt(r2 * t2), meta)
    better = EstimatorReport("CS_better", float(nr * npi), np.sqrt(r2 * p2), meta)
    return naive, better


def indices(report, true_error):
    """(I_eff, I_osc) = (|eta| / |err|, sum |eta_K| / |eta|).

    ``true_error`` must be in the units of ``report.total`` (the squared
    energy error for the energy estimator).
    """
    total = report.total
    if true_error == 0 or total == 0:
        raise ValueError("effectivity index undefined for a zero error or estimate")
    return abs(total) / abs(true_error), float(np.abs(report.per_cell).sum() / abs(total))


def local_global_ratio(rho_local, rho_global, A):
    """Largest ratio ||rho^L||_K / sum_V ||rho^G||_{omega^V} over cells.

    V runs over the patch vertices of K that are not on the Dirichlet
    boundary; cells without such vertices are skipped.
    """
    mesh = _same_mesh(rho_local, rho_global)
    loc = np.sqrt(energy_products(rho_local, rho_local, A))
    g2 = energy_products(rho_global, rho_global, A)
    pv, pc, _, off = patch_table(mesh)
    group = np.repeat(np.arange(len(off) - 1), np.diff(off))
    patch_norm = np.sqrt(np.bincount(group, weights=g2[pc]))
    keep = ~mesh.vertex_on_dirichlet[pv]
    S = np.bincount(pc[keep], weights=patch_norm[group[keep]], minlength=mesh.n_cells)
    ok = S > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ok, loc / np.where(ok, S, 1.0), 0.0)
    ratio[ok & (loc == 0)] = 0.0
    return float(ratio.max()) if ok.any() else 0.0


# -- z* ---------------------------------------------------------------------------

def _blocks(mesh):
    """Complete 2x2 blocks of active cells: (nblocks, 4) active indices, lexicographic."""
    act = mesh.active_ids
    tree_to_active = np.full(len(mesh.level), -1, dtype=np.int64)
    tree_to_active[act] = np.arange(len(act))
    blocks = []
    # siblings sharing a parent
    par = mesh.parent[act]
    has_par = par >= 0
    parents = np.unique(par[has_par])
    if parents.size:
        ch = tree_to_active[mesh.children[parents]]
        blocks.append(ch[(ch >= 0).all(axis=1)])
    # agglomerated roots
    roots = np.flatnonzero(~has_par)
    if roots.size:
        t = act[roots]
        bx, by = mesh.ix[t] // 2, mesh.iy[t] // 2
        sub = (mesh.ix[t] % 2) + 2 * (mesh.iy[t] % 2)
        key = by * mesh.n + bx
        order = np.lexsort((sub, key))
        k = key[order]
        start = np.flatnonzero(np.r_[True, k[1:] != k[:-1]])
        counts = np.diff(np.r_[start, len(k)])
        full = start[counts == 4]
        if full.size:
            blk = roots[order][full[:, None] + np.arange(4)]
            blocks.append(blk[~_straddles_cut(mesh, blk)])
    if not blocks:
        return np.zeros((0, 4), dtype=np.int64)
    return np.concatenate(blocks)


def _straddles_cut(mesh, blk):
    if mesh.domain != "slit":
        return np.zeros(len(blk), dtype=bool)
    o = mesh.cell_origin[blk[:, 0]]
    H = 2 * mesh.cell_h[blk[:, 0]]
    return (o[:, 1] < 0) & (o[:, 1] + H > 0) & (o[:, 0] + H > 0)


def _block_interpolants(z_h, blocks, m):
    """Q^m nodal values on each child of every block (m = 2p)."""
    p = z_h.degree
    U = z_h.cell_values()
    vals = np.empty((len(blocks), (m + 1) ** 2))
    for c in range(4):
        cx, cy = c % 2, c // 2
        i, j = np.meshgrid(np.arange(p + 1), np.arange(p + 1), indexing="xy")
        gidx = (cx * p + i) + (m + 1) * (cy * p + j)
        vals[:, gidx.ravel()] = U[blocks[:, c]]
    out = np.empty((len(blocks), 4, (m + 1) ** 2))
    el = lagrange(m)
    for c in range(4):
        shift = np.array([c % 2, c // 2], dtype=float)
        E = el.tabulate(0.5 * (el.nodes + shift))
        out[:, c] = vals @ E.T
    return out


def _fallback_fits(z_h, cells, m):
    """Least-squares Q^m fit of z_h over each cell and its vertex neighbours."""
    mesh = z_h.mesh
    p = z_h.degree
    cv = mesh.cell_vertices
    N = mesh.n_cells
    inc = sp.csr_matrix((np.ones(cv.size), (np.repeat(np.arange(N), 4), cv.ravel())), shape=(N, mesh.n_vertices))
    adj = (inc @ inc.T).tocsr()
    nodes_p = lagrange(p).nodes
    U = z_h.cell_values()
    el = lagrange(m)
    out = np.empty((len(cells), (m + 1) ** 2))
    for k, c in enumerate(cells):
        nb = adj.indices[adj.indptr[c]:adj.indptr[c + 1]]
        pts = (mesh.cell_points(nodes_p)[nb] - mesh.cell_origin[c]) / mesh.cell_h[c]
        pts = pts.reshape(-1, 2)
        vals = U[nb].ravel()
        _, uniq = np.unique(np.round(pts, 12), axis=0, return_index=True)
        B = el.tabulate(pts[uniq])
        coef, *_ = np.linalg.lstsq(B, vals[uniq], rcond=None)
        out[k] = coef
    return out


def reconstruct_zstar(z_h):
    """Continuous Q^{2p} approximation built from z_h on coarser blocks.

    On every complete 2x2 block of cells (siblings, or agglomerated base
    cells) the Q^p nodal values of z_h are exactly the Q^{2p} nodes of the
    block, and z* is that interpolant.  Remaining cells use a least-squares
    fit over their vertex neighbours.  Shared nodal values are averaged,
    hanging nodes are constrained and the Dirichlet boundary is set to zero.
    """
    mesh = z_h.mesh
    m = 2 * z_h.degree
    local = np.empty((mesh.n_cells, (m + 1) ** 2))
    done = np.zeros(mesh.n_cells, dtype=bool)
    blocks = _blocks(mesh)
    if len(blocks):
        vals = _block_interpolants(z_h, blocks, m)
        for c in range(4):
            local[blocks[:, c]] = vals[:, c]
        done[blocks.ravel()] = True
    rest = np.flatnonzero(~done)
    if rest.size:
        local[rest] = _fallback_fits(z_h, rest, m)
    dm = DofMap(mesh, "lagrange", m)
    tot = np.zeros(dm.n_dofs)
    cnt = np.zeros(dm.n_dofs)
    np.add.at(tot, dm.cell_dofs.ravel(), local.ravel())
    np.add.at(cnt, dm.cell_dofs.ravel(), 1.0)
    values = tot / np.maximum(cnt, 1.0)
    cons = dm.hanging_constraints().merged(dm.dirichlet_constraints(None))
    values = cons.distribute(values)
    zs = ScalarField(dm, values)
    zs.n_fallback = int(rest.size)
    return zs
