"""Quadtree meshes of axis-aligned squares with one-level hanging nodes.

A mesh is a forest of square cells grown from an n x n base grid.  Leaves
are the active cells, numbered by ascending forest id.  Refinement appends
the four children (lexicographic order) of every refined cell, so active
numbering is deterministic.

Two domains are supported: the unit square and the slit domain
(-1,1)^2 minus {(x, 0): 0 <= x <= 1}.  On the slit, vertices on the cut
(x > 0) are duplicated: sheet +1 belongs to cells above the cut, sheet -1
to cells below.  Faces lying on the cut are boundary faces.

Fine faces are faces that are not split: same-level interfaces, the fine
halves of a coarse/fine interface, and boundary faces.  Their normal points
from the lower active index to the higher one (outward on the boundary).
A coarse face that abuts two finer neighbours is kept as a separate entity
with two fine children; its midpoint is a hanging vertex.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .elements import FACE_AXIS, FACE_CORNERS

INTERIOR, DIRICHLET, NEUMANN = 0, 1, 2
DOMAINS = {"unit_square": (0.0, 0.0, 1.0), "slit": (-1.0, -1.0, 2.0)}
_OFFSETS = ((-1, 0), (1, 0), (0, -1), (0, 1))
_OPPOSITE = (1, 0, 3, 2)
_SAME, _COARSE, _FINE, _BOUNDARY = 0, 1, 2, 3


class MeshError(ValueError):
    pass


class _LevelLookup:
    """Vectorized lookup (level, ix, iy) -> active index via sorted keys."""

    def __init__(self, n, lev, ix, iy):
        self.n = n
        self.tables = {}
        for l in np.unique(lev):
            sel = np.flatnonzero(lev == l)
            keys = iy[sel] * (n << int(l)) + ix[sel]
            order = np.argsort(keys)
            self.tables[int(l)] = (keys[order], sel[order])

    def find(self, l, ix, iy):
        out = np.full(ix.shape, -1, dtype=np.int64)
        if l < 0 or l not in self.tables:
            return out
        width = self.n << l
        ok = (ix >= 0) & (iy >= 0) & (ix < width) & (iy < width)
        keys, ids = self.tables[l]
        q = iy[ok] * width + ix[ok]
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, len(keys) - 1)
        hit = keys[pos] == q
        res = np.full(q.shape, -1, dtype=np.int64)
        res[hit] = ids[pos[hit]]
        out[ok] = res
        return out


@dataclass(frozen=True)
class Patch:
    """Support of the constrained hat function of a non-hanging vertex."""

    vertex: int
    cells: np.ndarray  # active indices in canonical (y, x) order
    psi: np.ndarray  # (ncells, 4) hat values at cell corners
    on_dirichlet: bool


@dataclass(eq=False)
class Mesh:
    domain: str
    n: int
    level: np.ndarray
    ix: np.ndarray
    iy: np.ndarray
    parent: np.ndarray
    children: np.ndarray
    neumann: object = None  # callable (x, y) -> bool array for Neumann boundary parts
    _cache: dict = field(default_factory=dict, repr=False)

    # -- forest ---------------------------------------------------------------
    @cached_property
    def active_ids(self):
        return np.flatnonzero(self.children[:, 0] < 0)

    @property
    def n_cells(self):
        return len(self.active_ids)

    @cached_property
    def cell_level(self):
        return self.level[self.active_ids]

    @cached_property
    def origin(self):
        x0, y0, L = DOMAINS[self.domain]
        return np.array([x0, y0]), L / self.n

    @cached_property
    def cell_h(self):
        return self.origin[1] / 2.0 ** self.cell_level

    @cached_property
    def cell_origin(self):
        base, H = self.origin
        a = self.active_ids
        h = H / 2.0 ** self.level[a]
        return base + np.column_stack([self.ix[a] * h, self.iy[a] * h])

    def cell_points(self, ref_pts):
        """Physical coordinates of reference points in every cell: (N, n, 2)."""
        return self.cell_origin[:, None, :] + self.cell_h[:, None, None] * ref_pts[None]

    # -- topology -------------------------------------------------------------
    @cached_property
    def _topo(self):
        return _build_topology(self)

    def __getattr__(self, name):
        # topology arrays are exposed lazily as attributes
        if name.startswith("_") or name in ("domain", "n"):
            raise AttributeError(name)
        topo = self._topo
        if name in topo:
            return topo[name]
        raise AttributeError(name)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.face_axis)

    def faces_with_marker(self, marker):
        return np.flatnonzero(self.face_marker == marker)

    def locate(self, points):
        """Active cell containing each point (lowest index on ties); -1 outside."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        base, H = self.origin
        out = np.full(len(pts), -1, dtype=np.int64)
        lookup = self._topo["lookup"]
        for l in sorted(lookup.tables):
            h = H / 2.0**l
            rel = (pts - base) / h
            ij = np.floor(rel).astype(np.int64)
            width = self.n << l
            ij = np.where((rel == width) & (ij == width), width - 1, ij)
            found = lookup.find(l, ij[:, 0], ij[:, 1])
            take = (out < 0) & (found >= 0)
            out[take] = found[take]
        if self.domain == "slit":
            inside = (np.abs(pts) <= 1.0).all(axis=1)
        else:
            inside = ((pts >= 0.0) & (pts <= 1.0)).all(axis=1)
        out[~inside] = -1
        return out


def _forest_roots(n):
    j, i = np.divmod(np.arange(n * n), n)
    m = n * n
    return dict(level=np.zeros(m, dtype=np.int64), ix=i.astype(np.int64), iy=j.astype(np.int64),
                parent=np.full(m, -1, dtype=np.int64), children=np.full((m, 4), -1, dtype=np.int64))


def uniform_mesh(domain, n, neumann=None):
    """n x n square cells on ``domain`` ('unit_square' or 'slit')."""
    if domain not in DOMAINS:
        raise MeshError(f"unknown domain {domain!r}")
    if int(n) != n or n < 1:
        raise MeshError("cells per side must be a positive integer")
    if domain == "slit" and n % 2:
        raise MeshError("the slit domain needs an even number of cells per side")
    return Mesh(domain, int(n), neumann=neumann, **_forest_roots(int(n)))


def _coarser_neighbours(mesh, cells):
    nt, nb = mesh.neighbour_type[cells], mesh.neighbour[cells]
    return np.unique(nb[nt == _COARSE])


def refine(mesh, marked):
    """Refine the marked active cells plus the closure keeping the one-level rule."""
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_cells):
        raise MeshError("marked cell index out of range")
    todo = np.zeros(mesh.n_cells, dtype=bool)
    todo[marked] = True
    frontier = marked
    while frontier.size:
        extra = _coarser_neighbours(mesh, frontier)
        extra = extra[~todo[extra]]
        todo[extra] = True
        frontier = extra
    refined = mesh.active_ids[np.flatnonzero(todo)]
    m = len(mesh.level)
    k = len(refined)
    new = np.arange(m, m + 4 * k).reshape(k, 4)
    children = np.vstack([mesh.children.copy(), np.full((4 * k, 4), -1, dtype=np.int64)])
    children[refined] = new
    di = np.tile([0, 1, 0, 1], k)
    dj = np.tile([0, 0, 1, 1], k)
    rep = np.repeat(refined, 4)
    return Mesh(
        mesh.domain, mesh.n,
        level=np.concatenate([mesh.level, mesh.level[rep] + 1]),
        ix=np.concatenate([mesh.ix, 2 * mesh.ix[rep] + di]),
        iy=np.concatenate([mesh.iy, 2 * mesh.iy[rep] + dj]),
        parent=np.concatenate([mesh.parent, rep]),
        children=children,
        neumann=mesh.neumann,
    )


def refine_uniform(mesh, times=1):
    for _ in range(times):
        mesh = refine(mesh, np.arange(mesh.n_cells))
    return mesh


def _corner_keys(mesh, ids, lmax):
    """Integer vertex keys (Y, X, sheet) of the corners of forest cells ``ids``."""
    lev = mesh.level[ids]
    s = np.left_shift(1, lmax - lev)
    X0, Y0 = mesh.ix[ids] * s, mesh.iy[ids] * s
    X = np.stack([X0, X0 + s, X0, X0 + s], axis=1)
    Y = np.stack([Y0, Y0, Y0 + s, Y0 + s], axis=1)
    sheet = np.zeros_like(X)
    if mesh.domain == "slit":
        mid = (mesh.n << lmax) // 2
        on_cut = (Y == mid) & (X > mid)
        sheet[:, :2][on_cut[:, :2]] = 1
        sheet[:, 2:][on_cut[:, 2:]] = -1
    return np.stack([Y, X, sheet], axis=-1)


def _build_topology(mesh):
    act = mesh.active_ids
    N = len(act)
    lev, ix, iy = mesh.level[act], mesh.ix[act], mesh.iy[act]
    lmax = int(mesh.level.max())
    if (mesh.n << lmax) >= 2**30:
        raise MeshError("refinement depth exceeds the supported integer range")
    lookup = _LevelLookup(mesh.n, lev, ix, iy)

    # -- vertices -------------------------------------------------------------
    keys = _corner_keys(mesh, act, lmax).reshape(-1, 3)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    cell_vertices = inv.reshape(N, 4)
    base, H = mesh.origin
    unit = H / 2.0**lmax
    vertices = base + unit * uniq[:, [1, 0]].astype(float)

    # -- neighbours -------------------------------------------------------------
    ntype = np.full((N, 4), _BOUNDARY, dtype=np.int64)
    nbr = np.full((N, 4), -1, dtype=np.int64)
    fine_nbrs = np.full((N, 4, 2), -1, dtype=np.int64)
    width = mesh.n << lev
    for d, (dx, dy) in enumerate(_OFFSETS):
        nx, ny = ix + dx, iy + dy
        bnd = (nx < 0) | (ny < 0) | (nx >= width) | (ny >= width)
        if mesh.domain == "slit" and d in (2, 3):
            half = width // 2
            row = iy if d == 2 else iy + 1
            bnd |= (row == half) & (ix >= half)
        for l in np.unique(lev):
            sel = np.flatnonzero((lev == l) & ~bnd)
            if not sel.size:
                continue
            l = int(l)
            same = lookup.find(l, nx[sel], ny[sel])
            ok = same >= 0
            ntype[sel[ok], d], nbr[sel[ok], d] = _SAME, same[ok]
            rest = sel[~ok]
            coarse = lookup.find(l - 1, nx[rest] // 2, ny[rest] // 2)
            ok = coarse >= 0
            ntype[rest[ok], d], nbr[rest[ok], d] = _COARSE, coarse[ok]
            rest = rest[~ok]
            if not rest.size:
                continue
            cx, cy = 2 * nx[rest], 2 * ny[rest]
            if d == 0:
                pairs = ((cx + 1, cy), (cx + 1, cy + 1))
            elif d == 1:
                pairs = ((cx, cy), (cx, cy + 1))
            elif d == 2:
                pairs = ((cx, cy + 1), (cx + 1, cy + 1))
            else:
                pairs = ((cx, cy), (cx + 1, cy))
            f0 = lookup.find(l + 1, *pairs[0])
            f1 = lookup.find(l + 1, *pairs[1])
            if (f0 < 0).any() or (f1 < 0).any():
                raise MeshError("mesh violates the one-level rule")
            ntype[rest, d] = _FINE
            fine_nbrs[rest, d, 0], fine_nbrs[rest, d, 1] = f0, f1

    # -- fine faces -----------------------------------------------------------
    # each record: cell a, dir a, half a, cell b, dir b, half b
    recs = []
    for d in (1, 3):
        k = np.flatnonzero(ntype[:, d] == _SAME)
        recs.append(np.column_stack([k, np.full_like(k, d), np.full_like(k, -1),
                                     nbr[k, d], np.full_like(k, _OPPOSITE[d]), np.full_like(k, -1)]))
    for d in range(4):
        k = np.flatnonzero(ntype[:, d] == _COARSE)
        o = (iy[k] if FACE_AXIS[d] == 0 else ix[k]) % 2
        recs.append(np.column_stack([k, np.full_like(k, d), np.full_like(k, -1),
                                     nbr[k, d], np.full_like(k, _OPPOSITE[d]), o]))
    for d in range(4):
        k = np.flatnonzero(ntype[:, d] == _BOUNDARY)
        m1 = np.full_like(k, -1)
        recs.append(np.column_stack([k, np.full_like(k, d), m1, m1, m1, m1]))
    R = np.vstack(recs)
    # orient: lower cell first
    swap = (R[:, 3] >= 0) & (R[:, 3] < R[:, 0])
    R[swap] = R[swap][:, [3, 4, 5, 0, 1, 2]]
    order = np.lexsort((R[:, 1], R[:, 3], R[:, 0]))
    R = R[order]
    nfine = len(R)
    face_cells = R[:, [0, 3]]
    face_dir = R[:, [1, 4]]
    face_half = R[:, [2, 5]]
    fine_axis = np.array(FACE_AXIS)[face_dir[:, 0]]
    # fine face vertices: from the side where the face is a full cell face
    full_side = np.where(face_half[:, 0] < 0, 0, 1)
    fc = face_cells[np.arange(nfine), full_side]
    fd = face_dir[np.arange(nfine), full_side]
    fcorn = np.array(FACE_CORNERS)[fd]
    fine_verts = np.column_stack([cell_vertices[fc, fcorn[:, 0]], cell_vertices[fc, fcorn[:, 1]]])
    fine_len = mesh.cell_h[fc]
    fine_sign = np.where(np.isin(face_dir[:, 0], (1, 3)), 1.0, -1.0)

    cell_face = np.full((N, 4), -1, dtype=np.int64)
    for s in (0, 1):
        full = (face_half[:, s] < 0) & (face_cells[:, s] >= 0)
        cell_face[face_cells[full, s], face_dir[full, s]] = np.flatnonzero(full)

    # -- coarse faces ---------------------------------------------------------
    ck, cd = np.nonzero(ntype == _FINE)
    ncoarse = len(ck)
    child_of = np.full((N, 4, 2), -1, dtype=np.int64)
    for s in (0, 1):
        halfsel = face_half[:, s] >= 0
        child_of[face_cells[halfsel, s], face_dir[halfsel, s], face_half[halfsel, s]] = np.flatnonzero(halfsel)
    coarse_children = child_of[ck, cd]
    if (coarse_children < 0).any():
        raise MeshError("inconsistent coarse/fine interface")
    coarse_ids = nfine + np.arange(ncoarse)
    cell_face[ck, cd] = coarse_ids
    ccorn = np.array(FACE_CORNERS)[cd]
    coarse_verts = np.column_stack([cell_vertices[ck, ccorn[:, 0]], cell_vertices[ck, ccorn[:, 1]]])

    nF = nfine + ncoarse
    face_axis = np.concatenate([fine_axis, np.array(FACE_AXIS)[cd]])
    face_vertices = np.vstack([fine_verts, coarse_verts]) if ncoarse else fine_verts
    face_length = np.concatenate([fine_len, mesh.cell_h[ck]])
    face_children = np.full((nF, 2), -1, dtype=np.int64)
    face_children[nfine:] = coarse_children
    face_parent = np.full(nF, -1, dtype=np.int64)
    face_parent[coarse_children.ravel()] = np.repeat(coarse_ids, 2)
    is_fine = np.zeros(nF, dtype=bool)
    is_fine[:nfine] = True
    all_cells = np.full((nF, 2), -1, dtype=np.int64)
    all_cells[:nfine] = face_cells
    all_cells[nfine:, 0] = ck
    all_dirs = np.full((nF, 2), -1, dtype=np.int64)
    all_dirs[:nfine] = face_dir
    all_dirs[nfine:, 0] = cd
    all_half = np.full((nF, 2), -1, dtype=np.int64)
    all_half[:nfine] = face_half
    sign = np.ones(nF)
    sign[:nfine] = fine_sign
    sign[nfine:] = np.where(np.isin(cd, (1, 3)), 1.0, -1.0)

    midpoints = 0.5 * (vertices[face_vertices[:, 0]] + vertices[face_vertices[:, 1]])
    marker = np.zeros(nF, dtype=np.int64)
    bnd = np.flatnonzero(is_fine & (all_cells[:, 1] < 0))
    marker[bnd] = DIRICHLET
    if mesh.neumann is not None and bnd.size:
        neu = np.asarray(mesh.neumann(midpoints[bnd, 0], midpoints[bnd, 1]), dtype=bool)
        marker[bnd[neu]] = NEUMANN

    # -- hanging vertices ---------------------------------------------------------
    nv = len(vertices)
    hanging_face = np.full(nv, -1, dtype=np.int64)
    if ncoarse:
        hv = face_vertices[coarse_children[:, 0], 1]
        hanging_face[hv] = coarse_ids
    masters = np.full((nv, 2), -1, dtype=np.int64)
    hmask = hanging_face >= 0
    masters[hmask] = face_vertices[hanging_face[hmask]]
    on_dirichlet = np.zeros(nv, dtype=bool)
    on_dirichlet[face_vertices[marker == DIRICHLET].ravel()] = True
    on_boundary = np.zeros(nv, dtype=bool)
    on_boundary[face_vertices[marker != INTERIOR].ravel()] = True

    return dict(
        lookup=lookup, vertices=vertices, vertex_keys=uniq, cell_vertices=cell_vertices,
        neighbour_type=ntype, neighbour=nbr, fine_neighbours=fine_nbrs,
        n_fine_faces=nfine, face_cells=all_cells, face_dir=all_dirs, face_half=all_half,
        face_axis=face_axis, face_vertices=face_vertices, face_length=face_length,
        face_children=face_children, face_parent=face_parent, face_is_fine=is_fine,
        face_sign=sign, face_midpoint=midpoints, face_marker=marker, cell_face=cell_face,
        hanging_face=hanging_face, hanging_masters=masters, is_hanging=hmask,
        vertex_on_dirichlet=on_dirichlet, vertex_on_boundary=on_boundary, lmax=lmax,
    )


def fine_faces(mesh):
    """Ids of faces not split by a finer neighbour."""
    return np.arange(mesh.n_fine_faces)


def hanging_map(mesh):
    """Hanging vertex -> (coarse face id, parameter 0.5)."""
    hv = np.flatnonzero(mesh.is_hanging)
    return {int(v): (int(mesh.hanging_face[v]), 0.5) for v in hv}


def cell_face_pieces(mesh, cell, d):
    """Fine faces covering local face d of a cell: list of (face, half or -1)."""
    f = mesh.cell_face[cell, d]
    if mesh.face_is_fine[f]:
        return [(int(f), -1)]
    c0, c1 = mesh.face_children[f]
    return [(int(c0), 0), (int(c1), 1)]


def patch_table(mesh):
    """Supports of all constrained hat functions.

    Returns (vertex, cell, psi, offsets) with entries grouped by vertex and
    cells within a group in canonical (y, x) order.  ``psi`` holds the hat
    values at the four cell corners.
    """
    cv = mesh.cell_vertices
    N = len(cv)
    cells = np.repeat(np.arange(N), 4)
    corner = np.tile(np.arange(4), N)
    w = cv.ravel()
    hang = mesh.is_hanging[w]
    V = [w[~hang], mesh.hanging_masters[w[hang], 0], mesh.hanging_masters[w[hang], 1]]
    C = [cells[~hang], cells[hang], cells[hang]]
    K = [corner[~hang], corner[hang], corner[hang]]
    val = [np.ones((~hang).sum()), np.full(hang.sum(), 0.5), np.full(hang.sum(), 0.5)]
    V, C, K, val = (np.concatenate(a) for a in (V, C, K, val))
    org = mesh.cell_origin
    order = np.lexsort((org[C, 0], org[C, 1], V))
    V, C, K, val = V[order], C[order], K[order], val[order]
    key = V * N + C
    start = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    pv, pc = V[start], C[start]
    psi = np.zeros((len(start), 4))
    grp = np.cumsum(np.r_[False, key[1:] != key[:-1]])
    np.add.at(psi, (grp, K), val)
    offsets = np.flatnonzero(np.r_[True, pv[1:] != pv[:-1], True])
    return pv, pc, psi, offsets


def vertex_patch(mesh, v):
    """The patch of a single non-hanging vertex."""
    if mesh.is_hanging[v]:
        raise MeshError("hanging vertices carry no patch")
    pv, pc, psi, off = mesh._cache.get("patches") or mesh._cache.setdefault("patches", patch_table(mesh))
    g = np.searchsorted(pv[off[:-1]], v)
    s, e = off[g], off[g + 1]
    if pv[s] != v:
        raise MeshError(f"vertex {v} has no patch")
    return Patch(int(v), pc[s:e], psi[s:e], bool(mesh.vertex_on_dirichlet[v]))


def export_text(mesh, path):
    """Plain-text dump: vertices, forest cells and face markers."""
    lmax = int(mesh.level.max())
    keys = _corner_keys(mesh, np.arange(len(mesh.level)), lmax).reshape(-1, 3)
    uk = mesh.vertex_keys
    # lexicographic search of forest-cell corners among active vertex keys
    flat = lambda a: (a[:, 0] * (int(uk[:, 1].max()) + 1) + a[:, 1]) * 3 + a[:, 2] + 1
    ukf = flat(uk)
    vid = np.searchsorted(ukf, flat(keys)).reshape(-1, 4)
    active = (mesh.children[:, 0] < 0).astype(int)
    lines = [f"vertices {mesh.n_vertices}"]
    lines += [f"{i} {x:.17g} {y:.17g}" for i, (x, y) in enumerate(mesh.vertices)]
    lines.append(f"cells {len(mesh.level)}")
    lines += [f"{i} {a} {b} {c} {d} {l} {s}" for i, ((a, b, c, d), l, s)
              in enumerate(zip(vid, mesh.level, active))]
    lines.append(f"faces {mesh.n_faces}")
    lines += [f"{i} {m}" for i, m in enumerate(mesh.face_marker)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
