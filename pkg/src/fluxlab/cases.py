"""Test cases, the regularized point-evaluation goal and reference solutions."""

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .elements import gauss_1d, legendre_2d, tensor_gauss
from .galerkin import MetricTensor, RightHandSide

MANUFACTURED_CENTER = (0.5, 0.117)
SLIT_GOAL_CENTER = (0.25, 0.75)
GOAL_RADIUS = 1.0 / 16.0


# -- manufactured solution -----------------------------------------------------

def gaussian(x, y, a=100.0, c=MANUFACTURED_CENTER):
    return np.exp(-a * ((x - c[0]) ** 2 + (y - c[1]) ** 2))


def gaussian_grad(x, y, a=100.0, c=MANUFACTURED_CENTER):
    e = gaussian(x, y, a, c)
    return np.stack([-2 * a * (x - c[0]) * e, -2 * a * (y - c[1]) * e], axis=-1)


def gaussian_forcing(x, y, a=100.0, c=MANUFACTURED_CENTER):
    r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2
    return -gaussian(x, y, a, c) * (4 * a * a * r2 - 4 * a)


@dataclass
class TestCase:
    name: str
    domain: str
    A: MetricTensor
    rhs: RightHandSide
    g_D: object
    u: object = None
    grad_u: object = None
    goal_center: tuple = None

    @property
    def goal(self):
        return GoalFunctional(self.goal_center, domain=self.domain)


TestCase.__test__ = False  # not a pytest class


def manufactured_case():
    return TestCase("manufactured", "unit_square", MetricTensor.identity(),
                    RightHandSide(gaussian_forcing, quad_points=6), gaussian, gaussian, gaussian_grad,
                    MANUFACTURED_CENTER)


def _one(x, y):
    return np.ones(np.shape(x))


def slit_case():
    return TestCase("slit", "slit", MetricTensor.identity(), RightHandSide(_one, quad_points=2),
                    None, goal_center=SLIT_GOAL_CENTER)


def polynomial_case(p, seed=0):
    """Unit square with a random u in Q^p, exactly representable by the primal space."""
    C = np.random.default_rng(seed).uniform(-1, 1, (p + 1, p + 1))
    P = np.polynomial.polynomial
    dx, dy = P.polyder(C, axis=0), P.polyder(C, axis=1)
    lap = np.zeros_like(C)
    for axis in (0, 1):
        d2 = P.polyder(C, 2, axis=axis)
        lap[:d2.shape[0], :d2.shape[1]] += d2

    def u(x, y):
        return P.polyval2d(x, y, C)

    def grad(x, y):
        return np.stack([P.polyval2d(x, y, dx), P.polyval2d(x, y, dy)], axis=-1)

    def f(x, y):
        return -P.polyval2d(x, y, lap)

    return TestCase(f"polynomial{p}", "unit_square", MetricTensor.identity(), RightHandSide(f, quad_points=p + 3),
                    u, u, grad, (0.5, 0.5))


CASES = {"manufactured": manufactured_case, "slit": slit_case}


def make_case(name):
    if name not in CASES:
        raise ValueError(f"unknown case {name!r}")
    return CASES[name]()


# -- mollified point evaluation -----------------------------------------------------

def _cone_segment(x0, P1, P2, delta, nr=8, nt=8):
    rr, rt = gauss_1d(nr), gauss_1d(nt)
    R, T = np.meshgrid(rr.points, rt.points, indexing="ij")
    W = np.outer(rr.weights, rt.weights) * R
    d = P2 - P1
    base = P1 - x0
    cross = base[0] * d[1] - base[1] * d[0]
    pts = x0 + R[..., None] * (base + T[..., None] * d)
    pts = pts.reshape(-1, 2)
    return pts, (W * cross).ravel() * delta(pts)


def _cone_arc(x0, eps, t1, t2, delta, nr=8, nth=12):
    m = max(1, int(np.ceil((t2 - t1) / (np.pi / 8))))
    edges = np.linspace(t1, t2, m + 1)
    rr, rt = gauss_1d(nr), gauss_1d(nth)
    pts, wts = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        th = a + (b - a) * rt.points
        R, TH = np.meshgrid(rr.points, th, indexing="ij")
        W = np.outer(rr.weights * rr.points, rt.weights * (b - a)) * eps**2
        P = x0 + eps * R[..., None] * np.stack([np.cos(TH), np.sin(TH)], axis=-1)
        P = P.reshape(-1, 2)
        pts.append(P)
        wts.append(W.ravel() * delta(P))
    return np.vstack(pts), np.concatenate(wts)


def _cut_cell_rule(x0, eps, lo, hi, delta):
    """Signed cone quadrature of delta * polynomial over cell [lo, hi] intersected with the disk.

    Straight pieces and arcs share their end points (circle crossings are
    computed once), so the pieces form a closed curve even near tangency.
    """
    # edges counter-clockwise: (fixed axis, fixed value, start, end along the other axis)
    edges = ((1, lo[1], lo[0], hi[0]), (0, hi[0], lo[1], hi[1]),
             (1, hi[1], hi[0], lo[0]), (0, lo[0], hi[1], lo[1]))
    pts, wts, crossings = [], [], []
    for ax, c, a, b in edges:
        free = 1 - ax
        dc = c - x0[ax]
        disc = eps * eps - dc * dc
        if disc <= 0.0:
            continue
        s = np.sqrt(disc)
        lo_t, hi_t = x0[free] - s, x0[free] + s
        t1, t2 = (max(a, lo_t), min(b, hi_t)) if a < b else (min(a, hi_t), max(b, lo_t))
        if (t2 - t1) * (b - a) <= 0.0:
            continue
        ends = []
        for t in (t1, t2):
            P = np.empty(2)
            P[ax], P[free] = c, t
            ends.append(P)
            if t in (lo_t, hi_t):
                crossings.append(np.arctan2(P[1] - x0[1], P[0] - x0[0]) % (2 * np.pi))
        P, W = _cone_segment(x0, ends[0], ends[1], delta)
        pts.append(P)
        wts.append(W)
    angles = np.unique(crossings)
    if angles.size == 0:
        inside_cell = lo[0] < x0[0] < hi[0] and lo[1] < x0[1] < hi[1]
        spans = [(0.0, 2 * np.pi)] if inside_cell and not pts else []
    else:
        spans = list(zip(angles, np.r_[angles[1:], angles[0] + 2 * np.pi]))
    for t1, t2 in spans:
        if t2 - t1 <= 0.0:
            continue
        tm = 0.5 * (t1 + t2)
        pm = x0 + eps * np.array([np.cos(tm), np.sin(tm)])
        if lo[0] < pm[0] < hi[0] and lo[1] < pm[1] < hi[1]:
            P, W = _cone_arc(x0, eps, t1, t2, delta)
            pts.append(P)
            wts.append(W)
    if not pts:
        return np.zeros((0, 2)), np.zeros(0)
    return np.vstack(pts), np.concatenate(wts)


class GoalFunctional:
    """J(v) = int delta_eps v with delta_eps = c (1 - (r/eps)^2)^2 on the disk |x - x0| < eps.

    All integrals against piecewise polynomials are exact up to round-off:
    cells inside the disk use tensor Gauss rules, cells cut by the circle a
    signed decomposition into cones from the centre over straight and
    circular boundary pieces.
    """

    quad_points = 8

    def __init__(self, center, radius=GOAL_RADIUS, domain="unit_square"):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.scale = 3.0 / (np.pi * self.radius**2)
        self._check_support(domain)
        self._rules = {}

    def _check_support(self, domain):
        x, y = self.center
        e = self.radius
        if domain == "unit_square":
            ok = e < x < 1 - e and e < y < 1 - e
        else:
            ok = -1 + e < x < 1 - e and -1 + e < y < 1 - e
            # the support must not touch the cut {y = 0, x >= 0}
            if abs(y) <= e and x + e >= 0 and (x >= 0 or x * x + y * y <= e * e):
                ok = False
        if not ok:
            raise ValueError("mollifier support touches the domain boundary")

    def density(self, pts):
        r2 = ((pts - self.center) ** 2).sum(axis=-1) / self.radius**2
        return np.where(r2 < 1.0, self.scale * (1.0 - r2) ** 2, 0.0)

    def _poly_density(self, pts):
        r2 = ((pts - self.center) ** 2).sum(axis=-1) / self.radius**2
        return self.scale * (1.0 - r2) ** 2

    def rule(self, mesh):
        """Flat quadrature (cell, physical point, weight including the density)."""
        key = id(mesh)
        if key in self._rules and self._rules[key][0] is mesh:
            return self._rules[key][1]
        h = mesh.cell_h
        lo = mesh.cell_origin
        hi = lo + h[:, None]
        x0, eps = self.center, self.radius
        near = np.clip(x0, lo, hi)
        cand = np.flatnonzero(((near - x0) ** 2).sum(axis=1) < eps**2)
        far = np.maximum(np.abs(lo[cand] - x0), np.abs(hi[cand] - x0))
        inside = (far**2).sum(axis=1) <= eps**2
        cells, pts, wts = [], [], []
        tg = tensor_gauss(self.quad_points)
        for k in cand[inside]:
            P = lo[k] + h[k] * tg.points
            cells.append(np.full(len(P), k))
            pts.append(P)
            wts.append(tg.weights * h[k] ** 2 * self._poly_density(P))
        for k in cand[~inside]:
            P, W = _cut_cell_rule(x0, eps, lo[k], hi[k], self._poly_density)
            cells.append(np.full(len(P), k))
            pts.append(P)
            wts.append(W)
        out = (np.concatenate(cells), np.vstack(pts), np.concatenate(wts))
        self._rules = {key: (mesh, out)}
        return out

    def _ref(self, mesh, cells, pts):
        return (pts - mesh.cell_origin[cells]) / mesh.cell_h[cells, None]

    def load(self, dofmap):
        mesh = dofmap.mesh
        cells, pts, w = self.rule(mesh)
        vals = dofmap.element.tabulate(self._ref(mesh, cells, pts)) * w[:, None]
        return np.bincount(dofmap.cell_dofs[cells].ravel(), vals.ravel(), minlength=dofmap.n_dofs)

    def project(self, mesh, q):
        cells, pts, w = self.rule(mesh)
        P = legendre_2d(q, self._ref(mesh, cells, pts)) * w[:, None]
        out = np.zeros((mesh.n_cells, q * q))
        np.add.at(out, cells, P)
        return out / mesh.cell_h[:, None] ** 2

    def neumann_coefficients(self, mesh, faces, q):
        return np.zeros((len(faces), q))

    def cell_values(self, mesh, ref_pts):
        return self.density(mesh.cell_points(ref_pts))

    def oscillation(self, mesh, q):
        """Per-cell h_K ||delta - Pi delta||_K, exact."""
        cells, pts, w = self.rule(mesh)
        sq = np.bincount(cells, w * self._poly_density(pts), minlength=mesh.n_cells)
        c = self.project(mesh, q)
        sq = sq - (c**2).sum(axis=1) * mesh.cell_h**2
        return mesh.cell_h * np.sqrt(np.maximum(sq, 0.0))

    def __call__(self, field):
        """J(v_h) for a Lagrange field."""
        mesh = field.mesh
        cells, pts, w = self.rule(mesh)
        vals = np.einsum("ni,ni->n", field.dofmap.element.tabulate(self._ref(mesh, cells, pts)),
                         field.cell_values()[cells])
        return float(vals @ w)

    def of_function(self, u, nr=48, nth=96):
        """J(u) for a smooth function (polar Gauss x periodic trapezoid)."""
        rr = gauss_1d(nr)
        r = rr.points * self.radius
        th = 2 * np.pi * np.arange(nth) / nth
        R, TH = np.meshgrid(r, th, indexing="ij")
        x = self.center[0] + R * np.cos(TH)
        y = self.center[1] + R * np.sin(TH)
        dens = self.scale * (1 - (R / self.radius) ** 2) ** 2
        w = (rr.weights * self.radius * r)[:, None] * (2 * np.pi / nth)
        return float((dens * u(x, y) * w).sum())


def goal_functional(kind, center, radius=GOAL_RADIUS, domain="unit_square"):
    if kind != "regularized_point":
        raise ValueError(f"unknown goal kind {kind!r}")
    return GoalFunctional(center, radius, domain)


# -- reference cache -------------------------------------------------------------

_MAGIC = b"FLXREF1\n"


def config_hash(config):
    text = repr(sorted(config.items())).encode()
    return hashlib.sha256(text).hexdigest()


def write_reference(path, config, level, degree, vector):
    """Write header + little-endian float64 vector; exclusive creation."""
    vec = np.asarray(vector, dtype="<f8")
    header = f"{config_hash(config)} {int(level)} {int(degree)} {vec.size}\n".encode()
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
    with os.fdopen(fd, "wb") as fh:
        fh.write(_MAGIC + header + vec.tobytes())


def read_reference(path, config=None):
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError("not a reference file")
        h, level, degree, n = fh.readline().decode().split()
        data = np.frombuffer(fh.read(), dtype="<f8")
    if int(n) != data.size:
        raise ValueError("truncated reference file")
    if config is not None and h != config_hash(config):
        raise ValueError("reference file belongs to a different configuration")
    return dict(hash=h, level=int(level), degree=int(degree), vector=data.copy())


def reference_cache_path(cache_dir, config):
    return os.path.join(cache_dir, f"ref-{config_hash(config)[:16]}.bin")


# -- true errors and reference values ------------------------------------------------

@dataclass
class ReferenceValues:
    """Scalar reference data of a case without analytic solution.

    ``energy`` approximates ||grad u||^2_A = F(u) and ``goal`` approximates
    J(u); each comes with a guaranteed half-width (``*_bound``).
    """

    energy: float
    energy_bound: float
    goal: float
    goal_bound: float
    energy_dofs: int = 0
    goal_dofs: int = 0

    def as_vector(self):
        return np.array([self.energy, self.energy_bound, self.goal, self.goal_bound,
                         self.energy_dofs, self.goal_dofs], dtype=float)

    @classmethod
    def from_vector(cls, v):
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), int(v[5]))


def load_value(case, u_h):
    """F(u_h) with the exact load of the case."""
    return float(case.rhs.load(u_h.dofmap) @ u_h.values)


def true_energy_error(case, u_h, reference=None, quad_points=None):
    """||grad(u - u_h)||^2_A.

    Against the analytic gradient when the case has one; otherwise from the
    Galerkin identity ||grad(u - u_h)||^2 = F(u) - F(u_h), valid for
    homogeneous Dirichlet data.
    """
    mesh = u_h.mesh
    if case.grad_u is not None:
        rule = tensor_gauss(quad_points or u_h.degree + 6)
        xy = mesh.cell_points(rule.points)
        el = u_h.dofmap.element
        g = np.einsum("qic,Ki->Kqc", el.gradients(rule.points), u_h.cell_values()) / mesh.cell_h[:, None, None]
        d = g - case.grad_u(xy[..., 0], xy[..., 1])
        A = case.A.constant
        sq = np.einsum("Kqm,mn,Kqn->Kq", d, A, d)
        return float((sq @ rule.weights * mesh.cell_h**2).sum())
    if reference is None:
        raise ValueError(f"case {case.name!r} needs reference values for its true error")
    return reference.energy - load_value(case, u_h)


def true_goal_error(case, u_h, reference=None):
    """|J(u) - J(u_h)|."""
    J = case.goal
    if case.u is not None:
        exact = J.of_function(case.u)
    elif reference is not None:
        exact = reference.goal
    else:
        raise ValueError(f"case {case.name!r} needs reference values for its goal error")
    return abs(exact - J(u_h))


def theta_diagnostic(case, sigma, quad_points=8):
    """||sigma_h - grad u||_A against the analytic gradient."""
    if case.grad_u is None:
        raise ValueError("theta diagnostic needs an analytic gradient")
    mesh = sigma.mesh
    rule = tensor_gauss(quad_points)
    xy = mesh.cell_points(rule.points)
    Ainv = np.linalg.inv(case.A.constant)
    w = sigma.evaluate_cells(rule.points)
    d = w - case.grad_u(xy[..., 0], xy[..., 1]) @ case.A.constant.T
    sq = np.einsum("Kqm,mn,Kqn->Kq", d, Ainv, d)
    return float(np.sqrt((sq @ rule.weights * mesh.cell_h**2).sum()))


REFERENCE_DEFAULTS = dict(degree=3, energy_tol=1e-9, goal_tol=1e-8, bulk=0.5, n0=8, max_steps=80)


def _bulk_marking(indicators, theta):
    """Smallest set of cells carrying a theta share of the indicator sum."""
    eta = np.abs(indicators)
    order = np.lexsort((np.arange(eta.size), -eta))
    k = int(np.searchsorted(np.cumsum(eta[order]), theta * eta.sum())) + 1
    return np.sort(order[:min(k, eta.size)])


def _reference_config(case, **kw):
    cfg = dict(REFERENCE_DEFAULTS, case=case.name, center=tuple(case.goal_center or ()),
               radius=GOAL_RADIUS, version=1)
    cfg.update(kw)
    return cfg


def compute_reference(case, degree=3, energy_tol=1e-9, goal_tol=1e-8, bulk=0.5, n0=8, max_steps=80,
                      log=None):
    """Adaptive high-order reference values with guaranteed bounds.

    F(u) lies in [F(U), F(U) + eta^2] by the hypercircle identity (exact for
    cellwise polynomial data).  For the goal, J(u) - J(U) = a(u - U, z - Z)
    is approximated by <rho, varpi>_A; the remainder is bounded by
    3 ||rho|| (2 ||varpi|| + osc / pi), osc being the data oscillation of the
    goal density.
    """
    from .estimate import energy_estimate, energy_products
    from .flux import compute_residual, reconstruct_local
    from .galerkin import solve_dual, solve_primal
    from .mesh import refine, uniform_mesh

    A = case.A
    if case.g_D is not None:
        raise ValueError("reference values need homogeneous Dirichlet data")
    say = log or (lambda *a: None)
    mesh = uniform_mesh(case.domain, n0)
    for step in range(max_steps):
        U = solve_primal(mesh, degree, A, case.rhs)
        rho, _ = reconstruct_local(U, compute_residual(U, A, case.rhs), A)
        est = energy_estimate(rho, A)
        FU = load_value(case, U)
        say(f"energy reference step {step}: dofs {U.dofmap.n_dofs} F(U) {FU:.12e} eta^2 {est.total:.3e}")
        if est.total <= energy_tol:
            break
        mesh = refine(mesh, _bulk_marking(est.per_cell, bulk))
    else:
        raise RuntimeError("energy reference did not reach its tolerance")
    energy, energy_bound, edofs = FU + 0.5 * est.total, 0.5 * est.total, U.dofmap.n_dofs

    J = case.goal
    mesh = uniform_mesh(case.domain, n0)
    for step in range(max_steps):
        U = solve_primal(mesh, degree, A, case.rhs)
        Z = solve_dual(mesh, degree, A, J)
        rho, _ = reconstruct_local(U, compute_residual(U, A, case.rhs), A)
        varpi, _ = reconstruct_local(Z, compute_residual(Z, A, J), A)
        r2 = energy_products(rho, rho, A)
        v2 = energy_products(varpi, varpi, A)
        osc = np.sqrt((J.oscillation(mesh, degree + 1) ** 2).sum()) / np.pi
        corr = float(energy_products(rho, varpi, A).sum())
        bound = 3 * np.sqrt(r2.sum()) * (2 * np.sqrt(v2.sum()) + osc)
        value = J(U) + corr
        say(f"goal reference step {step}: dofs {U.dofmap.n_dofs} J {value:.12e} bound {bound:.3e}")
        if bound <= goal_tol:
            break
        ind = r2 / r2.sum() + v2 / v2.sum()
        mesh = refine(mesh, _bulk_marking(ind, bulk))
    else:
        raise RuntimeError("goal reference did not reach its tolerance")
    return ReferenceValues(energy, energy_bound, value, float(bound), edofs, U.dofmap.n_dofs)


def reference_values(case, cache_dir=None, log=None, **kw):
    """Reference values of a case, read from or written to a disk cache."""
    cfg = _reference_config(case, **kw)
    path = reference_cache_path(cache_dir, cfg) if cache_dir else None
    if path and os.path.exists(path):
        return ReferenceValues.from_vector(read_reference(path, cfg)["vector"])
    params = {k: cfg[k] for k in REFERENCE_DEFAULTS}
    ref = compute_reference(case, log=log, **params)
    if path:
        os.makedirs(cache_dir, exist_ok=True)
        try:
            write_reference(path, cfg, 0, cfg["degree"], ref.as_vector())
        except FileExistsError:
            pass
    return ref
