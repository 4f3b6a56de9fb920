import numpy as np
import pytest

from fluxlab.cases import make_case, polynomial_case
from fluxlab.elements import raviart_thomas
from fluxlab.flux import (EquilibrationError, compute_residual, data_oscillation, divergence_defect,
                          gradient_flux, localize_residual, normal_jump_defect, reconstruct_local, solve_patch)
from fluxlab.galerkin import MetricTensor, RightHandSide, assemble_stiffness, solve_primal
from fluxlab.mesh import INTERIOR, refine, uniform_mesh, vertex_patch
from fluxlab.space import DofMap, ScalarField
from oracle import PatchOracle, gauss

I = MetricTensor.identity()
one = RightHandSide(lambda x, y: 1.0 + 0.0 * x)


def hanging_mesh(domain="unit_square", n=4, **kw):
    m = uniform_mesh(domain, n, **kw)
    return refine(m, [0, m.n_cells // 2 + 1])


def east_neumann(x, y):
    return np.isclose(x, 1.0)


def neumann_problem(p=1):
    m = hanging_mesh(neumann=east_neumann)
    rhs = RightHandSide(lambda x, y: np.cos(2 * x) * (1 + y), g_N=lambda x, y: 0.5 + y**2)
    A = MetricTensor(constant=[[1.5, 0.2], [0.2, 1.0]])
    return solve_primal(m, p, A, rhs, lambda x, y: 0.0 * x), A, rhs


def test_residual_vanishes_for_exact_linear_solution():
    m = uniform_mesh("unit_square", 1)
    u = solve_primal(m, 1, I, RightHandSide(lambda x, y: 0.0 * x), lambda x, y: x)
    r = compute_residual(u, I, RightHandSide(lambda x, y: 0.0 * x))
    assert np.abs(r.cell).max() < 1e-12 and np.abs(r.face).max() < 1e-12


def test_q1_residual_against_dense_duality():
    # Q1 solution, Q2 test functions: r_h(v) = F(v) - a(u_h, v) for every
    # Q2 basis function vanishing on the boundary
    m = uniform_mesh("unit_square", 2)
    u = solve_primal(m, 1, I, one, None, solver="direct")
    r = compute_residual(u, I, one)
    np.testing.assert_allclose(r.cell[:, 0], 1.0)  # Laplacian of a bilinear function vanishes
    dm2 = DofMap(m, "lagrange", 2)
    u2 = u.evaluate(dm2.dof_coordinates())[0]
    brute = one.load(dm2) - assemble_stiffness(dm2, I) @ u2
    inner = np.setdiff1d(np.arange(dm2.n_dofs), dm2.dirichlet_constraints().slaves)
    assert np.abs(brute[inner]).max() > 1e-3  # not trivially zero
    np.testing.assert_allclose(r.assemble(dm2)[inner], brute[inner], atol=1e-13)
    for i in inner:
        e = np.zeros(dm2.n_dofs)
        e[i] = 1.0
        assert np.isclose(r.apply(ScalarField(dm2, e)), brute[i], atol=1e-13)


def test_residual_duality_with_neumann_and_metric():
    u, A, rhs = neumann_problem(2)
    r = compute_residual(u, A, rhs)
    dm = u.dofmap
    # F_h differs from F by the projection; test against Q^{q-1}-projected data by using Q1 tests
    v = ScalarField(dm, np.random.default_rng(0).standard_normal(dm.n_dofs))
    assert np.isclose(r.apply(v), r.assemble(dm) @ v.values, rtol=1e-12)


@pytest.mark.parametrize("domain", ["unit_square", "slit"])
def test_interior_hats_annihilate_residual(domain):
    case = make_case("manufactured" if domain == "unit_square" else "slit")
    m = hanging_mesh(domain)
    u = solve_primal(m, 1, case.A, case.rhs, case.g_D)
    r = compute_residual(u, case.A, case.rhs)
    dm = u.dofmap
    P, _ = dm.hanging_constraints().prolongation()
    b = P.T @ r.assemble(dm)
    free = ~(m.vertex_on_dirichlet | m.is_hanging)
    col = np.cumsum(~m.is_hanging) - 1  # vertex -> free column (vertices come first)
    assert np.abs(b[col[free]]).max() < 1e-9


def accumulate_local_data(r, A):
    """Sum the localized cell and face data over all patches."""
    m = r.mesh
    cell = np.zeros_like(r.cell)
    face = np.zeros_like(r.face)
    for v in range(m.n_vertices):
        if m.is_hanging[v]:
            continue
        loc = localize_residual(r, vertex_patch(m, v), A)
        pos = 0
        for entry, size in zip(loc.template.face_blocks, loc.template.block_sizes):
            if entry[0] == "cell":
                cell[loc.cells[entry[1]]] += loc.data[pos:pos + size]
            elif entry[0] == "face":
                _, i, d, j = entry
                f = m.cell_face[loc.cells[i], d]
                f = f if j < 0 else m.face_children[f, j]
                face[f] += loc.data[pos:pos + size]
            pos += size
    return cell, face


def test_localization_is_a_partition_of_unity():
    u, A, rhs = neumann_problem(1)
    r = compute_residual(u, A, rhs)
    cell, face = accumulate_local_data(r, A)
    m = r.mesh
    np.testing.assert_allclose(cell, -(m.cell_h**2)[:, None] * r.cell, atol=1e-12)
    nf = m.n_fine_faces
    live = m.face_marker[:nf] != 1  # Dirichlet traces are free
    np.testing.assert_allclose(face[live], -(m.face_length[:nf, None] * r.face)[live], atol=1e-12)


def test_interior_patch_equilibrated_and_boundary_patch_unconstrained():
    case = make_case("manufactured")
    m = hanging_mesh()
    u = solve_primal(m, 1, case.A, case.rhs, case.g_D)
    r = compute_residual(u, case.A, case.rhs)
    for v in range(m.n_vertices):
        if m.is_hanging[v]:
            continue
        loc = localize_residual(r, vertex_patch(m, v), case.A)
        if m.vertex_on_dirichlet[v]:
            assert loc.template.nullity == 0
        else:
            assert loc.template.nullity == 1
            assert abs(loc.data @ loc.template.operator.nullspace[:, 0]) < 1e-9


def test_zero_residual_gives_zero_correction():
    m = hanging_mesh()
    u = solve_primal(m, 1, I, RightHandSide(lambda x, y: 0.0 * x), lambda x, y: 2 * x - y)
    r = compute_residual(u, I, RightHandSide(lambda x, y: 0.0 * x))
    rho, sigma = reconstruct_local(u, r, I)
    assert np.abs(rho.coeffs).max() < 1e-12
    np.testing.assert_allclose(sigma.coeffs, gradient_flux(u, I).coeffs, atol=1e-12)


def test_unequilibrated_patch_rejected():
    case = make_case("manufactured")
    m = uniform_mesh("unit_square", 4)
    u = solve_primal(m, 1, case.A, case.rhs, case.g_D)
    r = compute_residual(u, case.A, case.rhs)
    r.cell[5] += 1.0  # break Galerkin orthogonality
    centre = int(np.argmin(np.abs(m.vertices - 0.5).sum(axis=1)))
    with pytest.raises(EquilibrationError):
        solve_patch(localize_residual(r, vertex_patch(m, centre), case.A))
    with pytest.raises(EquilibrationError):
        reconstruct_local(u, r, case.A)


def test_single_cell_dirichlet_corner_against_oracle():
    m = uniform_mesh("unit_square", 1)
    u = solve_primal(m, 2, I, one, None)
    r = compute_residual(u, I, one)
    check_patches_against_oracle(r, I, [0])


def check_patches_against_oracle(r, A, vertices):
    oracle = PatchOracle(r, A.constant)
    rt = raviart_thomas(r.q)
    s, _ = gauss(4)
    S, T = np.meshgrid(s, s)
    ref = np.column_stack([S.ravel(), T.ravel()])
    m = r.mesh
    worst = 0.0
    for v in vertices:
        patch = vertex_patch(m, v)
        x = solve_patch(localize_residual(r, patch, A))
        got = np.einsum("nic,Ki->Knc", rt.tabulate(ref), x) / m.cell_h[patch.cells][:, None, None]
        coef, monos = oracle.solve(v, patch.cells)
        want = PatchOracle.values(coef, monos, ref)
        scale = max(np.abs(want).max(), 1e-300)
        worst = max(worst, np.abs(got - want).max() / scale)
    assert worst < 1e-10
    return worst


def test_neumann_patches_against_oracle():
    u, A, rhs = neumann_problem(1)
    r = compute_residual(u, A, rhs)
    m = r.mesh
    east = [v for v in range(m.n_vertices) if np.isclose(m.vertices[v, 0], 1.0) and not m.is_hanging[v]]
    check_patches_against_oracle(r, A, east)


@pytest.mark.parametrize("p", [1, 2])
def test_polynomial_solution_has_zero_correction(p):
    case = polynomial_case(p)
    u = solve_primal(hanging_mesh(), p, case.A, case.rhs, case.g_D)
    r = compute_residual(u, case.A, case.rhs)
    rho, sigma = reconstruct_local(u, r, case.A)
    assert np.abs(rho.coeffs).max() < 1e-10


@pytest.mark.parametrize("name,domain", [("manufactured", "unit_square"), ("slit", "slit")])
def test_local_flux_is_equilibrated(name, domain):
    case = make_case(name)
    m = hanging_mesh(domain)
    for p in (1, 2):
        u = solve_primal(m, p, case.A, case.rhs, case.g_D)
        r = compute_residual(u, case.A, case.rhs)
        _, sigma = reconstruct_local(u, r, case.A)
        assert divergence_defect(sigma, r.load) < 1e-8
        assert normal_jump_defect(sigma) < 1e-8


def test_oscillation_zero_for_low_degree_data():
    m = hanging_mesh()
    rhs = RightHandSide(lambda x, y: 1 + 2 * x + 3 * y + x * y)
    assert data_oscillation(rhs, m, 2).max() < 1e-13
    assert data_oscillation(one, uniform_mesh("slit", 8), 2).max() < 1e-14


def test_oscillation_decays_at_higher_order():
    case = make_case("manufactured")
    q = 2
    osc = [np.sqrt((data_oscillation(case.rhs, uniform_mesh("unit_square", 16 * 2**l), q) ** 2).sum())
           for l in range(4)]
    ratios = np.array(osc[:-1]) / np.array(osc[1:])
    assert ratios[-1] >= 2**q
