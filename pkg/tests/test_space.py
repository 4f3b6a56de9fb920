import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluxlab.mesh import refine, uniform_mesh
from fluxlab.space import (BrokenFluxField, ConstraintSet, DofMap, ScalarField, apply_constraints,
                           distribute_dofs, export_field, hanging_constraints)


def interpolant(dm, f):
    xy = dm.dof_coordinates()
    return ScalarField(dm, f(xy[:, 0], xy[:, 1]))


def test_q1_dofs_unit_square():
    assert DofMap(uniform_mesh("unit_square", 16), "lagrange", 1).n_dofs == 289


def test_q1_dofs_slit():
    assert DofMap(uniform_mesh("slit", 32), "lagrange", 1).n_dofs == 1105


def test_broken_rt_dofs():
    m = refine(uniform_mesh("unit_square", 3), [4])
    assert distribute_dofs(m, "broken_rt", 1).n_dofs == 4 * m.n_cells


def test_unknown_family():
    with pytest.raises(ValueError):
        DofMap(uniform_mesh("unit_square", 2), "nedelec", 1)


def test_q1_hanging_weights_are_averages():
    m = refine(uniform_mesh("unit_square", 2), [0])
    dm = DofMap(m, "lagrange", 1)
    cs = hanging_constraints(dm)
    assert len(cs.slaves) == 2
    np.testing.assert_allclose(cs.weights, 0.5)
    for i, s in enumerate(cs.slaves):
        ms = cs.masters[cs.indptr[i]:cs.indptr[i + 1]]
        np.testing.assert_allclose(m.vertices[ms].mean(axis=0), m.vertices[s])


def test_uniform_mesh_has_no_constraints():
    cs = DofMap(uniform_mesh("unit_square", 3), "lagrange", 2).hanging_constraints()
    assert len(cs.slaves) == 0


def test_q2_hanging_face_weights():
    # left column refined: two coarse faces on x = 0.5, three slaves each
    m = refine(uniform_mesh("unit_square", 2), [0, 2])
    dm = DofMap(m, "lagrange", 2)
    cs = dm.hanging_constraints()
    assert len(cs.slaves) == 6
    lag = [lambda t: 2 * (t - 0.5) * (t - 1), lambda t: 4 * t * (1 - t), lambda t: 2 * t * (t - 0.5)]
    xy = dm.dof_coordinates()
    params = []
    for i, s in enumerate(cs.slaves):
        ms = cs.masters[cs.indptr[i]:cs.indptr[i + 1]]
        ws = cs.weights[cs.indptr[i]:cs.indptr[i + 1]]
        y0 = 0.0 if xy[s, 1] < 0.5 else 0.5
        t = (xy[s, 1] - y0) / 0.5
        params.append(t)
        for mm, w in zip(ms, ws):
            k = int(round((xy[mm, 1] - y0) / 0.25))
            assert np.isclose(w, lag[k](t))
    np.testing.assert_allclose(sorted(params), [0.25, 0.25, 0.5, 0.5, 0.75, 0.75])


def test_slit_dirichlet_zero_covers_both_sheets():
    m = uniform_mesh("slit", 4)
    dm = DofMap(m, "lagrange", 1)
    cs = dm.dirichlet_constraints(lambda x, y: 0.0 * x)
    on_cut = np.flatnonzero((np.abs(m.vertices[:, 1]) < 1e-14) & (m.vertices[:, 0] > 0))
    assert set(on_cut) <= set(cs.slaves.tolist())
    assert np.all(cs.inhom == 0)


def test_dirichlet_constant_data():
    dm = DofMap(refine(uniform_mesh("unit_square", 3), [0]), "lagrange", 2)
    cs = dm.dirichlet_constraints(lambda x, y: 1.0)
    assert len(cs.slaves) == 4 * 6 + 4  # Q2 boundary nodes; the refined corner adds two per side
    np.testing.assert_allclose(cs.inhom, 1.0)


def test_dirichlet_gaussian_values():
    from fluxlab.cases import gaussian
    dm = DofMap(uniform_mesh("unit_square", 4), "lagrange", 1)
    cs = dm.dirichlet_constraints(gaussian)
    xy = dm.dof_coordinates()[cs.slaves]
    np.testing.assert_allclose(cs.inhom, gaussian(xy[:, 0], xy[:, 1]))


def test_q1_reproduces_x():
    m = refine(uniform_mesh("unit_square", 3), [4])
    dm = DofMap(m, "lagrange", 1)
    u = interpolant(dm, lambda x, y: x)
    pts = np.random.default_rng(0).random((50, 2))
    val, grad = u.evaluate(pts)
    np.testing.assert_allclose(val, pts[:, 0], atol=1e-13)
    np.testing.assert_allclose(grad, np.tile([1.0, 0.0], (50, 1)), atol=1e-12)


def test_q2_reproduces_x_squared():
    dm = DofMap(refine(uniform_mesh("unit_square", 2), [0]), "lagrange", 2)
    u = interpolant(dm, lambda x, y: x**2)
    pts = np.random.default_rng(1).random((30, 2))
    np.testing.assert_allclose(u.evaluate(pts)[0], pts[:, 0] ** 2, atol=1e-13)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_constrained_field_continuous_across_hanging_face(p):
    m = refine(uniform_mesh("unit_square", 2), [0])
    dm = DofMap(m, "lagrange", p)
    cs = dm.hanging_constraints()
    u = ScalarField(dm, apply_constraints(cs, np.random.default_rng(p).standard_normal(dm.n_dofs)))
    # evaluate along x = 0.5, y in (0, 0.5) from the fine cell and the coarse cell
    ys = np.linspace(0.01, 0.49, 9)
    el = dm.element
    vals = []
    for x_ref, cell_pt in ((1.0, [0.25, 0.1]), (0.0, [0.75, 0.1])):
        c = m.locate([cell_pt])[0]
        ref = np.column_stack([np.full_like(ys, x_ref), (ys - m.cell_origin[c, 1]) / m.cell_h[c]])
        vals.append(el.tabulate(ref) @ u.cell_values()[c])
    np.testing.assert_allclose(vals[0], vals[1], atol=1e-12)


def test_distribute_idempotent_and_merge():
    dm = DofMap(refine(uniform_mesh("unit_square", 2), [0]), "lagrange", 2)
    hc, dc = dm.hanging_constraints(), dm.dirichlet_constraints(lambda x, y: x + y)
    cs = hc.merged(dc)
    u = cs.distribute(np.random.default_rng(0).standard_normal(dm.n_dofs))
    np.testing.assert_allclose(cs.distribute(u), u)
    P, b = cs.prolongation()
    np.testing.assert_allclose(P @ u[cs.free] + b, u, atol=1e-14)
    with pytest.raises(ValueError):
        hc.merged(hc)


def test_empty_constraint_set():
    cs = ConstraintSet.empty(5)
    np.testing.assert_array_equal(cs.free, np.arange(5))


def test_rt_conforming_constraints_match_half_traces():
    m = refine(uniform_mesh("unit_square", 2), [0])
    dm = DofMap(m, "rt", 2)
    cs = dm.hanging_constraints()
    assert len(cs.slaves) == 2 * 2 * 2  # two coarse faces, two halves, q moments


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.integers(1, 3))
def test_interpolation_exact_for_qp(seed, p):
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((p + 1, p + 1))
    f = lambda x, y: np.polynomial.polynomial.polyval2d(x, y, C)
    m = refine(uniform_mesh("unit_square", 2), [int(rng.integers(4))])
    u = interpolant(DofMap(m, "lagrange", p), f)
    pts = rng.random((10, 2))
    np.testing.assert_allclose(u.evaluate(pts)[0], f(pts[:, 0], pts[:, 1]), atol=1e-10)


def test_broken_flux_arithmetic_and_moments():
    m = uniform_mesh("unit_square", 2)
    a = BrokenFluxField(m, 1, np.ones((4, 4)))
    b = a + a - a
    np.testing.assert_allclose(b.coeffs, a.coeffs)
    vals = a.evaluate_cells(np.array([[0.5, 0.5]]))
    assert vals.shape == (4, 1, 2)
    assert b.normal_moments(0).shape == (1,)


def test_export_field(tmp_path):
    dm = DofMap(uniform_mesh("unit_square", 2), "lagrange", 1)
    u = interpolant(dm, lambda x, y: x * y)
    export_field(u, tmp_path / "u.txt")
    lines = (tmp_path / "u.txt").read_text().splitlines()
    assert len(lines) == 1 + dm.n_dofs
