"""Mesh builders, uniform refinement, tagging, and text serialization."""

import numpy as np
import pytest

from mdtsim.mesh import (BoundaryTag, MeshGenerationError, SimplicialMesh,
                         build_channel_2d, build_pipe_3d, load_mesh_text,
                         refine_uniform, save_mesh_text)


def test_boundary_tag_values():
    assert BoundaryTag.INFLOW == 1
    assert BoundaryTag.OUTFLOW == 2
    assert BoundaryTag.WALL == 3


def test_channel_counts_and_volume():
    mesh = build_channel_2d(8.0, 1.0, 8, 1)
    # crossed squares: (nx+1)(ny+1) grid points + nx*ny centers, 4 cells each
    assert mesh.n_vertices == 9 * 2 + 8
    assert mesh.n_cells == 32
    assert mesh.cell_volumes().sum() == pytest.approx(8.0, rel=1e-14)
    assert np.all(mesh.cell_volumes() > 0)


def test_channel_boundary_tags():
    mesh = build_channel_2d(8.0, 1.0, 8, 1)
    x = mesh.vertices
    for tag, predicate in [
            (BoundaryTag.INFLOW, lambda p: np.isclose(p[:, 0], 0.0)),
            (BoundaryTag.OUTFLOW, lambda p: np.isclose(p[:, 0], 8.0))]:
        facets = mesh.boundary_facets[mesh.facets_where(tag)]
        assert facets.size > 0
        assert np.all(predicate(x[facets.ravel()]))
    walls = mesh.boundary_facets[mesh.facets_where(BoundaryTag.WALL)]
    yw = x[walls.ravel()][:, 1]
    assert np.all(np.isclose(yw, 0.0) | np.isclose(yw, 1.0))
    n_f = len(mesh.boundary_facets)
    assert sum(len(mesh.facets_where(t)) for t in BoundaryTag) == n_f


def test_pipe_counts_and_volume():
    mesh = build_pipe_3d(0.5, 8.0, 0.5)
    assert mesh.dim == 3
    assert mesh.n_vertices == 119
    assert mesh.n_cells == 288
    vol = mesh.cell_volumes().sum()
    exact = np.pi * 0.25 * 8.0
    # polygonal cross-section under-resolves the disk
    assert vol < exact
    assert vol == pytest.approx(exact, rel=0.2)


def test_pipe_boundary_tags():
    mesh = build_pipe_3d(0.5, 8.0, 0.5)
    x = mesh.vertices
    inflow = mesh.boundary_facets[mesh.facets_where(BoundaryTag.INFLOW)]
    outflow = mesh.boundary_facets[mesh.facets_where(BoundaryTag.OUTFLOW)]
    assert np.allclose(x[inflow.ravel()][:, 0], 0.0)
    assert np.allclose(x[outflow.ravel()][:, 0], 8.0)
    walls = mesh.boundary_facets[mesh.facets_where(BoundaryTag.WALL)]
    r = np.hypot(x[walls.ravel()][:, 1] - 0.5, x[walls.ravel()][:, 2] - 0.5)
    assert np.allclose(r, 0.5, atol=1e-12)


@pytest.mark.parametrize("builder", [
    lambda: build_channel_2d(2.0, 1.0, 4, 2),
    lambda: build_pipe_3d(0.5, 2.0, 0.5),
])
def test_refine_uniform_structure(builder):
    mesh = builder()
    fine = refine_uniform(mesh)
    factor = 4 if mesh.dim == 2 else 8
    assert fine.n_cells == factor * mesh.n_cells
    assert fine.n_vertices == mesh.n_vertices + len(mesh.edges)
    assert fine.refinement_level == mesh.refinement_level + 1
    # original vertices first, then edge midpoints in mesh edge order
    assert np.array_equal(fine.vertices[:mesh.n_vertices], mesh.vertices)
    mids = mesh.vertices[mesh.edges].mean(axis=1)
    assert np.allclose(fine.vertices[mesh.n_vertices:], mids)
    assert fine.cell_volumes().sum() == pytest.approx(
        mesh.cell_volumes().sum(), rel=1e-12)
    # boundary measure is preserved too
    assert fine.boundary_measures.sum() == pytest.approx(
        mesh.boundary_measures.sum(), rel=1e-12)


def test_refine_preserves_tag_partition():
    mesh = build_channel_2d(2.0, 1.0, 2, 1)
    fine = refine_uniform(mesh)
    for tag in BoundaryTag:
        coarse_len = np.sum(
            mesh.boundary_measures[mesh.facets_where(tag)])
        fine_len = np.sum(
            fine.boundary_measures[fine.facets_where(tag)])
        assert fine_len == pytest.approx(coarse_len, rel=1e-12)


def test_crossed_refinement_matches_finer_build():
    # red refinement of crossed squares is the crossed mesh at half spacing
    refined = refine_uniform(build_channel_2d(8.0, 1.0, 8, 1))
    direct = build_channel_2d(8.0, 1.0, 16, 2)
    assert refined.n_vertices == direct.n_vertices
    assert refined.n_cells == direct.n_cells
    a = np.array(sorted(map(tuple, np.round(refined.vertices, 12))))
    b = np.array(sorted(map(tuple, np.round(direct.vertices, 12))))
    assert np.allclose(a, b, atol=1e-12)


def test_mesh_arrays_immutable():
    mesh = build_channel_2d(1.0, 1.0, 2, 2)
    with pytest.raises(ValueError):
        mesh.vertices[0, 0] = 99.0
    with pytest.raises(ValueError):
        mesh.cells[0, 0] = 0


def test_positive_orientation_enforced():
    # a cell given in clockwise order is reoriented, not rejected
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    cells = np.array([[0, 2, 1]])
    facets = np.array([[0, 1], [1, 2], [2, 0]])
    tags = np.full(3, BoundaryTag.WALL)
    mesh = SimplicialMesh(vertices, cells, facets, tags)
    assert mesh.cell_volumes()[0] == pytest.approx(0.5)


def test_degenerate_cell_rejected():
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    cells = np.array([[0, 1, 2]])
    facets = np.array([[0, 1]])
    tags = np.array([BoundaryTag.WALL])
    with pytest.raises(MeshGenerationError):
        SimplicialMesh(vertices, cells, facets, tags)


def test_save_load_round_trip(tmp_path):
    mesh = refine_uniform(build_channel_2d(2.0, 1.0, 2, 1))
    path = tmp_path / "mesh.txt"
    save_mesh_text(mesh, path)
    back = load_mesh_text(path)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.cells, mesh.cells)
    assert np.array_equal(back.boundary_facets, mesh.boundary_facets)
    assert np.array_equal(back.boundary_tags, mesh.boundary_tags)
    assert back.refinement_level == mesh.refinement_level


def test_edges_are_sorted_unique_pairs():
    mesh = build_pipe_3d(0.5, 2.0, 0.5)
    edges = mesh.edges
    assert np.all(edges[:, 0] < edges[:, 1])
    assert len(np.unique(edges, axis=0)) == len(edges)
    # every cell edge index points at an edge made of that cell's vertices
    ce = mesh.cell_edges
    for c in range(0, mesh.n_cells, 37):
        cell_set = set(mesh.cells[c])
        for e in ce[c]:
            assert set(edges[e]) <= cell_set
