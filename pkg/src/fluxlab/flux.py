"""Residuals and equilibrated flux reconstruction on vertex patches.

For u_h in Q^p the residual r_h(v) = F(v) - a(u_h, v) has a cell part
c = F_h + div(A grad u_h) in Q^{q-1} (q = p + 1) and a face part, the jump
[A grad u_h . n] of normal fluxes (on Neumann faces: the interior normal
flux minus g_N).  Then r_h(v) = sum_K (c, v)_K - sum_F (jump, v)_F.

A local correction rho^V in RT_q(omega^V) solves

    min ||rho||_A  subject to  div(A rho) = -Pi(psi c),   [A rho . n] = -Pi(psi jump)

with zero normal flux on the rest of the patch boundary and a free normal
flux on Dirichlet faces when the patch vertex lies on the Dirichlet boundary.
Fluxes are stored as w = A rho in reference RT coefficients; constraints are
written in moment units (divergence moments against P_ab, normal moments
against L_k), which makes the patch operators independent of the cell size.

Patches are grouped by a translation- and scale-invariant signature; one
dense minimum-norm operator per signature is applied to all its patches.
"""

from dataclasses import dataclass

import numpy as np

from .elements import FACE_CORNERS, OUTWARD, gauss_1d, legendre, legendre_2d, reference_ops, tensor_gauss
from .linalg import SolverError, saddle_operator
from .mesh import DIRICHLET, INTERIOR, NEUMANN, patch_table
from .space import BrokenFluxField

_INTERIOR, _ZERO, _FREE, _NEUMANN = 1, 2, 3, 4


class EquilibrationError(SolverError):
    """Patch data violate the compatibility condition r(psi^V) = 0."""


@dataclass
class Residual:
    mesh: object
    q: int
    cell: np.ndarray  # (N, q^2) Legendre coefficients of F_h + div(A grad u_h)
    face: np.ndarray  # (n_fine_faces, q) Legendre coefficients of the flux jump
    load: np.ndarray  # (N, q^2) coefficients of F_h

    def apply(self, v):
        """r_h(v) for a Lagrange field v (exact quadrature)."""
        mesh = self.mesh
        el = v.dofmap.element
        rule = tensor_gauss(max(self.q, v.degree) + 2)
        P = legendre_2d(self.q, rule.points)
        vals = v.cell_values() @ el.tabulate(rule.points).T
        cell = np.einsum("Ka,qa,Kq,q->K", self.cell, P, vals, rule.weights) * mesh.cell_h**2
        r1 = gauss_1d(max(self.q, v.degree) + 2)
        faces = np.arange(mesh.n_fine_faces)
        tr = face_trace(v, faces, r1.points)
        jump = self.face @ legendre(self.q, r1.points).T
        face = (jump * tr) @ r1.weights * mesh.face_length[:mesh.n_fine_faces]
        return cell.sum() - face.sum()

    def assemble(self, dofmap):
        """r_h(phi_i) for every Lagrange basis function of ``dofmap`` (unconstrained)."""
        mesh = self.mesh
        el = dofmap.element
        rule = tensor_gauss(max(self.q, dofmap.degree) + 2)
        P = legendre_2d(self.q, rule.points)
        cvals = (self.cell @ P.T) * rule.weights * mesh.cell_h[:, None] ** 2
        loc = cvals @ el.tabulate(rule.points)
        out = np.bincount(dofmap.cell_dofs.ravel(), loc.ravel(), minlength=dofmap.n_dofs)
        r1 = gauss_1d(max(self.q, dofmap.degree) + 2)
        nf = mesh.n_fine_faces
        jump = (self.face @ legendre(self.q, r1.points).T) * r1.weights * mesh.face_length[:nf, None]
        c, d, o = mesh.face_cells[:nf, 0], mesh.face_dir[:nf, 0], mesh.face_half[:nf, 0]
        for dd in range(4):
            for oo in (-1, 0, 1):
                sel = np.flatnonzero((d == dd) & (o == oo))
                if not sel.size:
                    continue
                t = r1.points if oo < 0 else 0.5 * (r1.points + oo)
                B = el.tabulate(_face_ref_points(dd, t))
                np.add.at(out, dofmap.cell_dofs[c[sel]], -(jump[sel] @ B))
        return out


def face_trace(v, faces, s, values=None):
    """Values of a Lagrange field on fine faces (taken from side 0): (nf, ns)."""
    mesh = v.mesh
    el = v.dofmap.element
    loc = v.cell_values() if values is None else values
    c, d, o = mesh.face_cells[faces, 0], mesh.face_dir[faces, 0], mesh.face_half[faces, 0]
    out = np.empty((len(faces), len(s)))
    for dd in range(4):
        for oo in (-1, 0, 1):
            sel = np.flatnonzero((d == dd) & (o == oo))
            if not sel.size:
                continue
            t = s if oo < 0 else 0.5 * (s + oo)
            pts = _face_ref_points(dd, t)
            out[sel] = loc[c[sel]] @ el.tabulate(pts).T
    return out


def _face_ref_points(d, t):
    from .elements import FACE_AXIS, FACE_SIDE
    pts = np.empty((len(t), 2))
    ax = FACE_AXIS[d]
    pts[:, ax] = FACE_SIDE[d]
    pts[:, 1 - ax] = t
    return pts


def _check_metric(A):
    if not A.is_cellwise_constant:
        raise ValueError("flux reconstructions need a cellwise constant metric")


def compute_residual(u_h, A, rhs):
    """Cell and face parts of the Galerkin residual of u_h."""
    _check_metric(A)
    mesh, p = u_h.mesh, u_h.degree
    q = p + 1
    ops = reference_ops(p, q)
    U = u_h.cell_values()
    h = mesh.cell_h
    load = rhs.project(mesh, q)
    cell = load + (U @ ops.lap_for(A.constant).T) / h[:, None] ** 2
    nf = mesh.n_fine_faces
    face = np.zeros((nf, q))
    for side in (0, 1):
        c = mesh.face_cells[:nf, side]
        d = mesh.face_dir[:nf, side]
        o = mesh.face_half[:nf, side]
        for dd in range(4):
            Tr = ops.flux_trace_for(A.constant, dd)
            for oo in (-1, 0, 1):
                sel = np.flatnonzero((c >= 0) & (d == dd) & (o == oo))
                if not sel.size:
                    continue
                tr = (U[c[sel]] @ Tr.T) / h[c[sel], None] * OUTWARD[dd]
                if oo >= 0:
                    tr = tr @ ops.R[oo].T
                face[sel] += tr
    marker = mesh.face_marker[:nf]
    face[marker == DIRICHLET] = 0.0
    neu = np.flatnonzero(marker == NEUMANN)
    if neu.size:
        face[neu] -= rhs.neumann_coefficients(mesh, neu, q)
    return Residual(mesh, q, cell, face, load)


# -- patch templates ---------------------------------------------------------------

def _piece_psi(psi, d, j):
    """Hat values at the two ends of a face piece: psi (..., 4) -> (..., 2)."""
    a, b = FACE_CORNERS[d]
    pa, pb = psi[..., a], psi[..., b]
    if j < 0:
        return np.stack([pa, pb], axis=-1)
    mid = 0.5 * (pa + pb)
    return np.stack([pa, mid], axis=-1) if j == 0 else np.stack([mid, pb], axis=-1)


def _piece_face(mesh, cells, d, j):
    f = mesh.cell_face[cells, d]
    return f if j < 0 else mesh.face_children[f, j]


def _classify(mesh, vertex, cells, psi):
    """Per entry and direction: split flag and class of up to two pieces."""
    n = len(cells)
    split = ~mesh.face_is_fine[mesh.cell_face[cells]]
    cls = np.zeros((n, 4, 2), dtype=np.int64)
    on_d = mesh.vertex_on_dirichlet[vertex]
    for d in range(4):
        for j, half in enumerate((0, 1)):
            for sp_flag in (False, True):
                sel = np.flatnonzero(split[:, d] == sp_flag)
                if not sel.size or (not sp_flag and j == 1):
                    continue
                jj = half if sp_flag else -1
                f = _piece_face(mesh, cells[sel], d, jj)
                ends = _piece_psi(psi[sel], d, jj)
                nz = (ends != 0).any(axis=1)
                mk = mesh.face_marker[f]
                c = np.where(nz, np.select([mk == INTERIOR, mk == DIRICHLET], [_INTERIOR, _FREE], _NEUMANN),
                             np.where((mk == DIRICHLET) & on_d[sel], _FREE, _ZERO))
                cls[sel, d, j] = c
    return split, cls


@dataclass
class PatchTemplate:
    """Constraint layout and solution operator shared by congruent patches."""

    ncells: int
    cell_blocks: list  # slot indices, in row order
    face_blocks: list  # (slot, dir, piece) with data, or None for zero rows; in row order
    block_sizes: list
    operator: object  # SaddleOperator
    nullity: int


def _build_template(mesh, cells, psi, split, cls, q, M):
    ops = reference_ops(max(q - 1, 1), q)
    nrt = ops.rt.ndofs
    nc = len(cells)
    slot_of = {int(c): i for i, c in enumerate(cells)}

    def piece_op(i, d, j):
        row = np.zeros((q, nc * nrt))
        block = np.eye(q) * OUTWARD[d]
        if j >= 0:
            block = 0.5 * ops.R[j] * OUTWARD[d]
        row[:, i * nrt + d * q:i * nrt + (d + 1) * q] = block
        return row

    rows, layout, sizes = [], [], []
    for i in range(nc):
        r = np.zeros((q * q, nc * nrt))
        r[:, i * nrt:(i + 1) * nrt] = ops.D
        rows.append(r)
        layout.append(("cell", i))
        sizes.append(q * q)
    seen = set()
    for i in range(nc):
        for d in range(4):
            if split[i, d] and cls[i, d, 0] == _ZERO and cls[i, d, 1] == _ZERO:
                rows.append(piece_op(i, d, -1))
                layout.append(("zero",))
                sizes.append(q)
                continue
            for j in ((0, 1) if split[i, d] else (-1,)):
                c = cls[i, d, max(j, 0)]
                if c == _FREE:
                    continue
                if c == _ZERO:
                    rows.append(piece_op(i, d, j))
                    layout.append(("zero",))
                elif c == _NEUMANN:
                    rows.append(piece_op(i, d, j))
                    layout.append(("face", i, d, j))
                else:
                    f = int(_piece_face(mesh, np.array([cells[i]]), d, j)[0])
                    if f in seen:
                        continue
                    seen.add(f)
                    side = 1 if mesh.face_cells[f, 0] == cells[i] else 0
                    other = int(mesh.face_cells[f, side])
                    if other not in slot_of:
                        raise SolverError("patch is not closed under interior faces")
                    i2, d2, j2 = slot_of[other], int(mesh.face_dir[f, side]), int(mesh.face_half[f, side])
                    rows.append(piece_op(i, d, j) + piece_op(i2, d2, j2))
                    layout.append(("face", i, d, j))
                sizes.append(q)
    B = np.vstack(rows)
    has_free = (cls == _FREE).any()
    Mb = np.kron(np.eye(nc), M)
    op = saddle_operator(Mb, B, expected_nullity=0 if has_free else 1)
    return PatchTemplate(nc, [l[1] for l in layout if l[0] == "cell"], layout, sizes, op, 0 if has_free else 1)


_TEMPLATE_CACHE = {}


def _signatures(mesh, pv, pc, psi, off):
    """Integer signature rows (one per patch) and the canonical entry order."""
    lmax = mesh.lmax
    act = mesh.active_ids
    s = np.left_shift(1, lmax - mesh.level[act])
    X0, Y0 = mesh.ix[act] * s, mesh.iy[act] * s
    keys = mesh.vertex_keys
    XV, YV = keys[pv, 1], keys[pv, 0]
    npatch = len(off) - 1
    counts = np.diff(off)
    pid = np.repeat(np.arange(npatch), counts)
    hmin = np.minimum.reduceat(s[pc], off[:-1])[pid]
    split, cls = _classify(mesh, pv, pc, psi)
    feat = np.column_stack([
        (X0[pc] - XV) // hmin, (Y0[pc] - YV) // hmin, s[pc] // hmin,
        np.rint(2 * psi).astype(np.int64),
        split.astype(np.int64), cls.reshape(-1, 8),
    ])
    width = feat.shape[1]
    maxc = int(counts.max())
    rows = np.zeros((npatch, maxc * width + 1), dtype=np.int8)
    slot = np.arange(len(pc)) - off[pid]
    flat = rows[:, :-1].reshape(npatch, maxc, width)
    flat[pid, slot] = feat
    rows[:, -1] = counts
    return rows, split, cls, slot, pid


def _patch_groups(mesh):
    cache = mesh._cache
    if "patch_groups" not in cache:
        pv, pc, psi, off = cache.get("patches") or cache.setdefault("patches", patch_table(mesh))
        rows, split, cls, slot, pid = _signatures(mesh, pv, pc, psi, off)
        void = np.ascontiguousarray(rows).view(np.dtype((np.void, rows.shape[1])))[:, 0]
        uniq, first, inv = np.unique(void, return_index=True, return_inverse=True)
        cache["patch_groups"] = (pv, pc, psi, off, split, cls, uniq, first, inv.ravel())
    return cache["patch_groups"]


@dataclass
class LocalResidual:
    vertex: int
    cells: np.ndarray
    psi: np.ndarray
    data: np.ndarray  # constraint right-hand side in template row order
    template: PatchTemplate


def _template_for(mesh, key, cells, psi, split, cls, q, A):
    ck = (q, A.constant.tobytes(), key)
    t = _TEMPLATE_CACHE.get(ck)
    if t is None:
        ops = reference_ops(max(q - 1, 1), q)
        M = ops.mass_for(np.linalg.inv(A.constant))
        t = _build_template(mesh, cells, psi, split, cls, q, M)
        _TEMPLATE_CACHE[ck] = t
    return t


def _gather_data(r, template, cells, psi):
    """Constraint data for P congruent patches: cells (P, nc), psi (P, nc, 4)."""
    mesh, q = r.mesh, r.q
    ops = reference_ops(max(q - 1, 1), q)
    h = mesh.cell_h
    P = cells.shape[0]
    out = np.zeros((P, sum(template.block_sizes)))
    pos = 0
    for entry, size in zip(template.face_blocks, template.block_sizes):
        if entry[0] == "cell":
            i = entry[1]
            W = np.einsum("pc,cab->pab", psi[:, i], ops.Gpsi)
            out[:, pos:pos + size] = -(h[cells[:, i]] ** 2)[:, None] * np.einsum("pab,pb->pa", W, r.cell[cells[:, i]])
        elif entry[0] == "face":
            _, i, d, j = entry
            f = _piece_face(mesh, cells[:, i], d, j)
            ends = _piece_psi(psi[:, i], d, j)
            H = np.einsum("pe,ekl->pkl", ends, ops.Hpsi)
            out[:, pos:pos + size] = -mesh.face_length[f, None] * np.einsum("pkl,pl->pk", H, r.face[f])
        pos += size
    return out


def _equilibration_defect(template, data):
    if template.nullity == 0:
        return np.zeros(len(data))
    N = template.operator.nullspace
    return np.abs(data @ N).max(axis=1)


def localize_residual(r, patch, A=None):
    """Constraint data of the local problem on one patch."""
    from .galerkin import MetricTensor
    A = A or MetricTensor.identity()
    mesh = r.mesh
    split, cls = _classify(mesh, np.full(len(patch.cells), patch.vertex), patch.cells, patch.psi)
    key = ("single", patch.vertex, mesh_id(mesh))
    t = _build_template(mesh, patch.cells, patch.psi, split, cls, r.q,
                        reference_ops(max(r.q - 1, 1), r.q).mass_for(np.linalg.inv(A.constant)))
    data = _gather_data(r, t, patch.cells[None], patch.psi[None])[0]
    return LocalResidual(patch.vertex, patch.cells, patch.psi, data, t)


def mesh_id(mesh):
    return id(mesh)


def solve_patch(local, tol=1e-8):
    """Minimum-energy local correction: (ncells, ndofs_rt) flux coefficients."""
    defect = _equilibration_defect(local.template, local.data[None])[0]
    if defect > tol:
        raise EquilibrationError(f"patch of vertex {local.vertex} is not equilibrated (defect {defect:.3e})")
    x = local.template.operator.apply(local.data)
    return x.reshape(local.template.ncells, -1)


def reconstruct_local(u_h, r, A, tol=1e-8):
    """Local equilibrated correction rho^L and flux sigma^L = rho^L + Pi_RT(A grad u_h)."""
    _check_metric(A)
    mesh, q = u_h.mesh, r.q
    ops = reference_ops(u_h.degree, q)
    pv, pc, psi, off, split, cls, uniq, first, inv = _patch_groups(mesh)
    npatch = len(off) - 1
    counts = np.diff(off)
    rho = np.zeros((mesh.n_cells, ops.rt.ndofs))
    order = np.argsort(inv, kind="stable")
    bounds = np.flatnonzero(np.r_[True, inv[order][1:] != inv[order][:-1], True])
    worst = 0.0
    for g in range(len(bounds) - 1):
        members = order[bounds[g]:bounds[g + 1]]
        rep = members[0]
        nc = int(counts[rep])
        s0 = off[rep]
        t = _template_for(mesh, uniq[g].tobytes(), pc[s0:s0 + nc], psi[s0:s0 + nc], split[s0:s0 + nc],
                          cls[s0:s0 + nc], q, A)
        idx = off[members][:, None] + np.arange(nc)
        cells, ps = pc[idx], psi[idx]
        data = _gather_data(r, t, cells, ps)
        defect = _equilibration_defect(t, data)
        if defect.size:
            worst = max(worst, float(defect.max()))
            if defect.max() > tol:
                v = int(pv[off[members[int(np.argmax(defect))]]])
                raise EquilibrationError(f"patch of vertex {v} is not equilibrated (defect {defect.max():.3e})")
        x = t.operator.apply(data).reshape(len(members), nc, -1)
        for i in range(nc):
            rho[cells[:, i]] += x[:, i]
    rho_f = BrokenFluxField(mesh, q, rho)
    grad = BrokenFluxField(mesh, q, u_h.cell_values() @ ops.igrad_for(A.constant).T)
    rho_f.max_defect = worst
    return rho_f, rho_f + grad


def gradient_flux(u_h, A, q=None):
    """Pi_RT(A grad u_h) as a broken flux (exact for q = p + 1)."""
    q = q or u_h.degree + 1
    ops = reference_ops(u_h.degree, q)
    return BrokenFluxField(u_h.mesh, q, u_h.cell_values() @ ops.igrad_for(A.constant).T)


def data_oscillation(rhs, mesh, q, quad_points=None):
    """Per-cell h_K ||f - F_h||_K with F_h the Q^{q-1} projection."""
    rule = tensor_gauss(quad_points or max(rhs.quad_points, q + 3))
    fv = rhs.cell_values(mesh, rule.points)
    c = rhs.project(mesh, q)
    diff = fv - c @ legendre_2d(q, rule.points).T
    return mesh.cell_h * np.sqrt((diff**2) @ rule.weights) * mesh.cell_h


# -- checks ---------------------------------------------------------------------

def divergence_defect(flux, load):
    """max |div w + F_h| over cells, in Legendre coefficients (physical units)."""
    ops = reference_ops(max(flux.q - 1, 1), flux.q)
    div = flux.coeffs @ ops.D.T / flux.mesh.cell_h[:, None] ** 2
    return np.abs(div + load).max()


def normal_jump_defect(flux):
    """max over interior fine faces of |[w . n]| moments (physical units)."""
    mesh, q = flux.mesh, flux.q
    nf = mesh.n_fine_faces
    ops = reference_ops(max(q - 1, 1), q)
    total = np.zeros((nf, q))
    for side in (0, 1):
        c = mesh.face_cells[:nf, side]
        d = mesh.face_dir[:nf, side]
        o = mesh.face_half[:nf, side]
        for dd in range(4):
            for oo in (-1, 0, 1):
                sel = np.flatnonzero((c >= 0) & (d == dd) & (o == oo))
                if not sel.size:
                    continue
                m = flux.coeffs[c[sel], dd * q:(dd + 1) * q] * OUTWARD[dd]
                if oo >= 0:
                    m = 0.5 * m @ ops.R[oo].T
                total[sel] += m
    interior = mesh.face_marker[:nf] == INTERIOR
    scaled = total / mesh.face_length[:nf, None]
    return np.abs(scaled[interior]).max() if interior.any() else 0.0
