"""Invariant self-checks on small meshes, reported one line per check."""

import numpy as np

from .adapt import solve_step
from .cases import make_case, polynomial_case
from .elements import legendre_2d, raviart_thomas, tensor_gauss
from .estimate import energy_products
from .flux import compute_residual, divergence_defect, gradient_flux, normal_jump_defect
from .mesh import refine, uniform_mesh
from .space import DofMap, ScalarField


def _hanging_mesh(domain="unit_square", n=4):
    m = uniform_mesh(domain, n)
    return refine(m, [0, m.n_cells // 2 + 1])


def check_mollifier():
    J = make_case("manufactured").goal
    m = uniform_mesh("unit_square", 16)
    dm = DofMap(m, "lagrange", 1)
    return abs(J(ScalarField(dm, np.ones(dm.n_dofs))) - 1.0), 1e-10


def check_commuting(q=2, samples=10, seed=0):
    rng = np.random.default_rng(seed)
    rt = raviart_thomas(q)
    rule = tensor_gauss(q + 3)
    P = legendre_2d(q, rule.points)
    worst = 0.0
    for _ in range(samples):
        C = rng.standard_normal((2, q + 1, q + 1))
        pol = np.polynomial.polynomial
        field = lambda x: np.stack([pol.polyval2d(x[:, 0], x[:, 1], C[0]), pol.polyval2d(x[:, 0], x[:, 1], C[1])], -1)
        d = rt.interpolate(field)
        div = pol.polyval2d(rule.points[:, 0], rule.points[:, 1], pol.polyder(C[0], axis=0)) + \
            pol.polyval2d(rule.points[:, 0], rule.points[:, 1], pol.polyder(C[1], axis=1))
        proj = (P * rule.weights[:, None]).T @ div
        got = (P * rule.weights[:, None]).T @ (rt.divergence(rule.points) @ d)
        worst = max(worst, np.abs(got - proj).max())
    return worst, 1e-11


def _step(name, domain, n=4):
    case = make_case(name)
    mesh = _hanging_mesh(domain, n if domain == "unit_square" else 2 * n)
    return case, solve_step(case, mesh, 1, goal=True)


def check_equilibration():
    case, step = _step("manufactured", "unit_square")
    r = compute_residual(step.u, case.A, case.rhs)
    worst = 0.0
    mesh = step.mesh
    dm = step.u.dofmap
    cons = dm.hanging_constraints()
    for v in range(mesh.n_vertices):
        if mesh.is_hanging[v] or mesh.vertex_on_dirichlet[v]:
            continue
        psi = np.zeros(dm.n_dofs)
        psi[v] = 1.0
        worst = max(worst, abs(r.apply(ScalarField(dm, cons.distribute(psi)))))
    return worst, 1e-9


def check_divergence():
    case, step = _step("slit", "slit")
    sigma = step.rho_local + gradient_flux(step.u, case.A)
    r = compute_residual(step.u, case.A, case.rhs)
    return max(divergence_defect(sigma, r.load), normal_jump_defect(sigma)), 1e-8


def check_identities():
    worst = 0.0
    for name, domain in (("manufactured", "unit_square"), ("slit", "slit")):
        _, step = _step(name, domain)
        rp = step.reports
        a = abs(rp["rho_tau"].global_value - rp["rho_varpi"].global_value) / abs(rp["rho_varpi"].global_value)
        b = abs(rp["II_star"].global_value - rp["DWR_star"].global_value) / abs(rp["II_star"].global_value)
        worst = max(worst, a, b)
    return worst, 1e-9


def check_energy_sum():
    case, step = _step("manufactured", "unit_square")
    rep = step.reports["energy_local"]
    total = energy_products(step.rho_local, step.rho_local, case.A).sum()
    return abs(rep.per_cell.sum() - rep.global_value**2) / total, 1e-12


def check_exactness():
    worst = 0.0
    for p in (1, 2):
        case = polynomial_case(p)
        step = solve_step(case, _hanging_mesh(), p, goal=True)
        vals = [abs(rep.global_value) for rep in step.reports.values()]
        worst = max(worst, *vals)
    return worst, 1e-10


CHECKS = {
    "mollifier J(1) = 1": check_mollifier,
    "RT interpolation commutes with div": check_commuting,
    "residual vanishes on hat functions": check_equilibration,
    "local flux is equilibrated": check_divergence,
    "global estimator identities": check_identities,
    "indicator sum equals squared estimate": check_energy_sum,
    "estimators vanish on exact solutions": check_exactness,
}


def run_checks(out=print):
    ok = True
    for name, fn in CHECKS.items():
        try:
            value, tol = fn()
            passed = bool(value <= tol)
            out(f"{'PASS' if passed else 'FAIL'}  {name}: {value:.2e} (tol {tol:.0e})")
        except Exception as exc:  # report and continue
            passed = False
            out(f"FAIL  {name}: {type(exc).__name__}: {exc}")
        ok &= passed
    return ok
