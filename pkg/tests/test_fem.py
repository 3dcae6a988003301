"""Lagrange spaces, assembly, boundary terms, and constraint handling."""

import numpy as np
import pytest

from mdtsim.fem import (DirichletConstraint, DiscreteField, FESpace,
                        apply_dirichlet, assemble_boundary_vector,
                        assemble_matrix, assemble_vector, interpolate,
                        l2_project, mass_kernel, merge_constraints,
                        stiffness_kernel)
from mdtsim.mesh import BoundaryTag, build_channel_2d, build_pipe_3d, refine_uniform


@pytest.fixture(scope="module")
def square():
    return refine_uniform(build_channel_2d(1.0, 1.0, 2, 2))


@pytest.fixture(scope="module")
def pipe():
    return build_pipe_3d(0.5, 2.0, 0.5)


def test_dof_counts(square):
    p1 = FESpace(square, degree=1)
    p2 = FESpace(square, degree=2)
    assert p1.n_dofs == square.n_vertices
    assert p2.n_dofs == square.n_vertices + len(square.edges)
    v2 = FESpace(square, degree=2, components=2)
    assert v2.n_dofs == 2 * p2.n_dofs


@pytest.mark.parametrize("degree", [1, 2])
def test_interpolation_reproduces_polynomials(square, degree):
    # degree-d interpolation is exact on degree-d polynomials
    space = FESpace(square, degree=degree)
    if degree == 1:
        fn = lambda x: 2.0 + 3.0 * x[:, 0] - 1.5 * x[:, 1]
    else:
        fn = lambda x: (1.0 + x[:, 0] * x[:, 1] + x[:, 0] ** 2
                        - 0.5 * x[:, 1] ** 2)
    field = interpolate(fn, space)
    mass = assemble_matrix(space, space, mass_kernel(), order=2 * degree + 1)

    exact = interpolate(fn, FESpace(refine_uniform(square), degree=degree))
    # compare at the finer space's vertices via direct point evaluation
    probe = fn(space.dof_points)
    assert np.allclose(field.coeffs, probe, atol=1e-14)
    assert mass.shape == (space.n_dofs, space.n_dofs)
    assert len(exact.coeffs) > len(field.coeffs)


def test_mass_matrix_total_is_volume(square, pipe):
    for mesh, vol in [(square, 1.0), (pipe, pipe.cell_volumes().sum())]:
        for degree in (1, 2):
            space = FESpace(mesh, degree=degree)
            mass = assemble_matrix(space, space, mass_kernel(), order=4)
            ones = np.ones(space.n_dofs)
            assert ones @ (mass @ ones) == pytest.approx(vol, rel=1e-12)


def test_stiffness_annihilates_constants(square):
    space = FESpace(square, degree=2)
    stiff = assemble_matrix(space, space, stiffness_kernel(), order=4)
    ones = np.ones(space.n_dofs)
    assert np.abs(stiff @ ones).max() < 1e-12
    sym_gap = np.abs((stiff - stiff.T)).max()
    assert sym_gap < 1e-13


def test_stiffness_energy_of_linear_field(square):
    # grad(a x + b y) is constant, so the Dirichlet energy is |grad|^2 * |Omega|
    space = FESpace(square, degree=1)
    field = interpolate(lambda x: 3.0 * x[:, 0] - 2.0 * x[:, 1], space)
    stiff = assemble_matrix(space, space, stiffness_kernel(), order=2)
    energy = field.coeffs @ (stiff @ field.coeffs)
    assert energy == pytest.approx(13.0, rel=1e-12)


def test_dirichlet_selection_and_values(square):
    space = FESpace(square, degree=2)
    bc = space.dirichlet([BoundaryTag.INFLOW], lambda x: x[:, 1] ** 2)
    pts = space.dof_points[bc.dofs]
    assert np.allclose(pts[:, 0], 0.0, atol=1e-12)
    assert np.allclose(bc.values, pts[:, 1] ** 2, atol=1e-14)
    zero_bc = space.dirichlet([BoundaryTag.WALL])
    assert np.all(zero_bc.values == 0.0)


def test_dirichlet_vector_components(square):
    space = FESpace(square, degree=2, components=2)
    bc = space.dirichlet([BoundaryTag.INFLOW],
                         lambda x: np.stack([x[:, 1], 0 * x[:, 1]], axis=1))
    # both components of each boundary point are constrained
    n_scalar = space.n_scalar_dofs
    comp = bc.dofs // n_scalar
    assert set(comp) == {0, 1}


def test_merge_constraints_first_wins():
    a = DirichletConstraint(np.array([0, 1]), np.array([1.0, 2.0]))
    b = DirichletConstraint(np.array([1, 2]), np.array([9.0, 3.0]))
    merged = merge_constraints(a, b)
    lookup = dict(zip(merged.dofs.tolist(), merged.values.tolist()))
    assert lookup == {0: 1.0, 1: 2.0, 2: 3.0}


def test_apply_dirichlet_enforces_rows(square):
    space = FESpace(square, degree=1)
    stiff = assemble_matrix(space, space, stiffness_kernel(), order=2)
    rhs = assemble_vector(space, lambda ctx: np.einsum(
        "cq,cqi->ci", ctx.w, ctx.test_vals), order=2)
    bc = space.dirichlet([BoundaryTag.INFLOW, BoundaryTag.OUTFLOW,
                          BoundaryTag.WALL], lambda x: x[:, 0])
    a_c, b_c = apply_dirichlet(stiff, rhs, bc)
    x = np.linalg.solve(a_c.toarray(), b_c)
    assert np.allclose(x[bc.dofs], bc.values, atol=1e-12)

    a_s, b_s = apply_dirichlet(stiff, rhs, bc, symmetrize=True)
    assert np.abs((a_s - a_s.T)).max() < 1e-13
    x_s = np.linalg.solve(a_s.toarray(), b_s)
    assert np.allclose(x_s, x, atol=1e-10)


def test_boundary_vector_integrates_data(square):
    # integrating the P1 hat functions over one side sums to its length
    space = FESpace(square, degree=1)
    vec = assemble_boundary_vector(
        space, lambda ctx: np.einsum("fq,fqi->fi", ctx.w, ctx.test_vals),
        [BoundaryTag.INFLOW], order=3)
    assert vec.sum() == pytest.approx(1.0, rel=1e-12)
    # data weighting: integral of y over the inflow side x=0 is 1/2
    vec_y = assemble_boundary_vector(
        space, lambda ctx: np.einsum(
            "fq,fq,fqi->fi", ctx.w, ctx.x[:, :, 1], ctx.test_vals),
        [BoundaryTag.INFLOW], order=3)
    assert vec_y.sum() == pytest.approx(0.5, rel=1e-12)


def test_boundary_normals_point_outward(square):
    # normal x-component integrated over the inflow side must be -length
    space = FESpace(square, degree=1)
    vec = assemble_boundary_vector(
        space, lambda ctx: np.einsum(
            "fq,f,fqi->fi", ctx.w, ctx.normals[:, 0], ctx.test_vals),
        [BoundaryTag.INFLOW], order=2)
    assert vec.sum() == pytest.approx(-1.0, rel=1e-12)


def test_l2_project_matches_interpolation_for_polynomials(square):
    space = FESpace(square, degree=2)
    fn = lambda x: x[:, 0] ** 2 - x[:, 0] * x[:, 1]
    proj = l2_project(fn, space, order=5)
    nodal = interpolate(fn, space)
    assert np.allclose(proj.coeffs, nodal.coeffs, atol=1e-10)


def test_vector_field_component_layout(square):
    space = FESpace(square, degree=1, components=2)
    field = interpolate(lambda x: np.stack([x[:, 0], -x[:, 1]], axis=1), space)
    comp = field.component_coeffs()
    assert comp.shape == (2, square.n_vertices)
    assert np.allclose(comp[0], square.vertices[:, 0])
    assert np.allclose(comp[1], -square.vertices[:, 1])


def test_discrete_field_validates_length(square):
    space = FESpace(square, degree=1)
    with pytest.raises(ValueError):
        DiscreteField(space, np.zeros(space.n_dofs + 1))
