"""Conforming simplicial meshes with tagged boundaries and uniform refinement.

Provides the two scenario geometries (a rectangular channel in 2D and a
circular pipe in 3D, both with the flow axis along x1), standard red
refinement, and a plain-text import/export format.  Meshes are immutable
after construction; derived quantities (edge tables, affine maps, boundary
geometry) are computed lazily and cached.
"""

from __future__ import annotations

from enum import IntEnum
from functools import cached_property
from math import factorial

import numpy as np

__all__ = [
    "BoundaryTag",
    "MeshGenerationError",
    "SimplicialMesh",
    "build_channel_2d",
    "build_pipe_3d",
    "refine_uniform",
    "cell_diameter_h",
    "save_mesh_text",
    "load_mesh_text",
]

#: Geometric tolerance for assigning boundary tags.
GEOM_TOL = 1e-9

# Local edges of the reference simplex, in the order used for quadratic
# (midpoint) degrees of freedom and for refinement.
_LOCAL_EDGES = {
    2: ((0, 1), (0, 2), (1, 2)),
    3: ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)),
}

# Local facets opposite to each vertex (facet i omits vertex i).
_LOCAL_FACETS = {
    2: ((1, 2), (0, 2), (0, 1)),
    3: ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)),
}


class BoundaryTag(IntEnum):
    """Partition of the boundary: inlet plane, outlet plane, lateral wall."""

    INFLOW = 1
    OUTFLOW = 2
    WALL = 3


_TAG_NAMES = {t: t.name.lower() for t in BoundaryTag}
_TAG_FROM_NAME = {v: k for k, v in _TAG_NAMES.items()}


class MeshGenerationError(RuntimeError):
    """Raised when mesh construction produces an invalid cell."""

    def __init__(self, message: str, cell_id: int | None = None):
        super().__init__(message)
        self.cell_id = cell_id


def _encode_pairs(pairs: np.ndarray, n: int) -> np.ndarray:
    """Map sorted index pairs to unique int64 keys for fast lookup."""
    return pairs[:, 0].astype(np.int64) * n + pairs[:, 1]


class SimplicialMesh:
    """Conforming triangle (2D) or tetrahedral (3D) mesh.

    Parameters
    ----------
    vertices : (n_v, dim) float array
    cells : (n_c, dim+1) int array
        Vertex indices per cell; reordered on construction so every cell
        has positive signed volume.
    boundary_facets : (n_f, dim) int array
        Vertex indices of boundary facets (edges in 2D, triangles in 3D).
    boundary_tags : (n_f,) int array of BoundaryTag values
    refinement_level : int
    """

    def __init__(self, vertices, cells, boundary_facets, boundary_tags,
                 refinement_level: int = 0):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        self.boundary_facets = np.ascontiguousarray(boundary_facets, dtype=np.int64)
        self.boundary_tags = np.ascontiguousarray(boundary_tags, dtype=np.int64)
        self.refinement_level = int(refinement_level)

        if self.vertices.ndim != 2 or self.vertices.shape[1] not in (2, 3):
            raise ValueError("vertices must be (n, 2) or (n, 3)")
        if self.cells.shape[1] != self.dim + 1:
            raise ValueError("cells must have dim+1 vertices")
        if self.boundary_facets.shape != (len(self.boundary_tags), self.dim):
            raise ValueError("boundary facet/tag shape mismatch")

        self._orient_cells()
        self._check_cells()
        for arr in (self.vertices, self.cells, self.boundary_facets, self.boundary_tags):
            arr.setflags(write=False)

    # ------------------------------------------------------------------ basic
    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def _orient_cells(self):
        det = self._signed_volumes() * factorial(self.dim)
        flip = det < 0
        if np.any(flip):
            cells = self.cells.copy()
            cells[flip, -2], cells[flip, -1] = (
                self.cells[flip, -1], self.cells[flip, -2])
            self.cells = cells

    def _signed_volumes(self) -> np.ndarray:
        x = self.vertices[self.cells]
        edges = x[:, 1:, :] - x[:, :1, :]
        return np.linalg.det(edges) / factorial(self.dim)

    def _check_cells(self):
        vols = self._signed_volumes()
        scale = max(np.abs(self.vertices).max(), 1.0)
        bad = np.flatnonzero(vols <= 1e-14 * scale**self.dim)
        if bad.size:
            raise MeshGenerationError(
                f"degenerate cell {bad[0]} (volume {vols[bad[0]]:.3e})",
                cell_id=int(bad[0]))

    # ------------------------------------------------------------- edge table
    @cached_property
    def _edge_data(self):
        pairs = np.array(_LOCAL_EDGES[self.dim])
        all_edges = np.sort(self.cells[:, pairs].reshape(-1, 2), axis=1)
        edges, inverse = np.unique(all_edges, axis=0, return_inverse=True)
        cell_edges = inverse.reshape(self.n_cells, len(pairs))
        return edges, cell_edges

    @property
    def edges(self) -> np.ndarray:
        """Unique mesh edges as sorted vertex pairs, lexicographic order."""
        return self._edge_data[0]

    @property
    def cell_edges(self) -> np.ndarray:
        """Per-cell indices into `edges`, in local edge order."""
        return self._edge_data[1]

    def edge_lookup(self, pairs: np.ndarray) -> np.ndarray:
        """Indices into `edges` for given (sorted or unsorted) vertex pairs."""
        keys = _encode_pairs(np.sort(pairs, axis=1), self.n_vertices)
        table = _encode_pairs(self.edges, self.n_vertices)
        idx = np.searchsorted(table, keys)
        if np.any(idx >= len(table)) or np.any(table[np.minimum(idx, len(table) - 1)] != keys):
            raise KeyError("pair is not a mesh edge")
        return idx

    # --------------------------------------------------------------- geometry
    @cached_property
    def _affine_maps(self):
        x = self.vertices[self.cells]
        jac = np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)  # columns = edge vectors
        det = np.linalg.det(jac)
        inv_t = np.swapaxes(np.linalg.inv(jac), 1, 2)
        return jac, det, inv_t

    @property
    def jacobians(self) -> np.ndarray:
        return self._affine_maps[0]

    @property
    def jacobian_dets(self) -> np.ndarray:
        return self._affine_maps[1]

    @property
    def inv_jacobians_t(self) -> np.ndarray:
        return self._affine_maps[2]

    def cell_volumes(self) -> np.ndarray:
        return self.jacobian_dets / factorial(self.dim)

    def cell_diameters(self) -> np.ndarray:
        """Mesh-size measure vol(K)^(1/dim) per cell."""
        return self.cell_volumes() ** (1.0 / self.dim)

    # ---------------------------------------------------------- boundary data
    @cached_property
    def _boundary_data(self):
        # Match each boundary facet to its unique parent cell and compute
        # outward unit normals and facet measures.
        d = self.dim
        local = np.array(_LOCAL_FACETS[d])
        cell_facets = np.sort(self.cells[:, local], axis=2).reshape(-1, d)
        order = np.lexsort(cell_facets.T[::-1])
        sorted_facets = cell_facets[order]

        target = np.sort(self.boundary_facets, axis=1)
        # locate each boundary facet among the cell facets
        lo = np.searchsorted(
            sorted_facets.view([("", sorted_facets.dtype)] * d).ravel(),
            target.view([("", target.dtype)] * d).ravel())
        if np.any(lo >= len(sorted_facets)):
            raise ValueError("boundary facet not found in any cell")
        idx = order[lo]
        found = sorted_facets[lo]
        if not np.array_equal(found, target):
            raise ValueError("boundary facet not found in any cell")

        parent = idx // (d + 1)
        opposite_local = idx % (d + 1)
        opp_vertex = self.cells[parent, opposite_local]

        x = self.vertices[self.boundary_facets]
        if d == 2:
            t = x[:, 1] - x[:, 0]
            measure = np.linalg.norm(t, axis=1)
            normal = np.column_stack([t[:, 1], -t[:, 0]]) / measure[:, None]
        else:
            c = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
            nrm = np.linalg.norm(c, axis=1)
            measure = 0.5 * nrm
            normal = c / nrm[:, None]
        center = x.mean(axis=1)
        outward = np.einsum("fi,fi->f", normal,
                            center - self.vertices[opp_vertex]) > 0
        normal[~outward] *= -1.0
        return parent, normal, measure

    @property
    def boundary_parent_cells(self) -> np.ndarray:
        return self._boundary_data[0]

    @property
    def boundary_normals(self) -> np.ndarray:
        return self._boundary_data[1]

    @property
    def boundary_measures(self) -> np.ndarray:
        return self._boundary_data[2]

    def facets_where(self, tag: BoundaryTag) -> np.ndarray:
        """Indices of boundary facets carrying `tag`."""
        return np.flatnonzero(self.boundary_tags == int(tag))

    # ------------------------------------------------------------- validation
    def validate(self):
        """Check conformity; raises ValueError on violation."""
        d = self.dim
        local = np.array(_LOCAL_FACETS[d])
        cell_facets = np.sort(self.cells[:, local], axis=2).reshape(-1, d)
        uniq, counts = np.unique(cell_facets, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise ValueError("facet shared by more than two cells")
        exterior = uniq[counts == 1]
        tagged = np.unique(np.sort(self.boundary_facets, axis=1), axis=0)
        if exterior.shape != tagged.shape or not np.array_equal(exterior, tagged):
            raise ValueError("tagged boundary does not match mesh exterior")
        if not np.isin(self.boundary_tags, [int(t) for t in BoundaryTag]).all():
            raise ValueError("unknown boundary tag")
        self._boundary_data  # parent lookup; raises if a facet has no cell
        return True


# ------------------------------------------------------------------ builders

def _tag_facets(vertices, facets, length):
    """Geometric tag rule: x1=0 inflow, x1=length outflow, rest wall."""
    x1 = vertices[facets, 0]
    tags = np.full(len(facets), int(BoundaryTag.WALL), dtype=np.int64)
    tags[np.all(np.abs(x1) <= GEOM_TOL, axis=1)] = int(BoundaryTag.INFLOW)
    tags[np.all(np.abs(x1 - length) <= GEOM_TOL, axis=1)] = int(BoundaryTag.OUTFLOW)
    return tags


def _exterior_facets(cells, dim):
    local = np.array(_LOCAL_FACETS[dim])
    cell_facets = np.sort(cells[:, local], axis=2).reshape(-1, dim)
    uniq, counts = np.unique(cell_facets, axis=0, return_counts=True)
    return uniq[counts == 1]


def build_channel_2d(length: float, height: float, nx: int, ny: int) -> SimplicialMesh:
    """Crossed-triangle mesh of [0, length] x [0, height].

    Each of the nx*ny grid quads is split into 4 triangles around its
    center, giving 4*nx*ny cells and (nx+1)*(ny+1) + nx*ny vertices.
    """
    if length <= 0 or height <= 0:
        raise ValueError("length and height must be positive")
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be at least 1")

    xs = np.linspace(0.0, length, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    grid = np.column_stack([gx.ravel(), gy.ravel()])  # index j*(nx+1)+i
    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    ccx, ccy = np.meshgrid(cx, cy, indexing="xy")
    centers = np.column_stack([ccx.ravel(), ccy.ravel()])
    vertices = np.vstack([grid, centers])

    n_grid = len(grid)
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    i, j = i.ravel(), j.ravel()
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + (nx + 1)
    v11 = v01 + 1
    vc = n_grid + j * nx + i
    cells = np.vstack([
        np.column_stack([v00, v10, vc]),
        np.column_stack([v10, v11, vc]),
        np.column_stack([v11, v01, vc]),
        np.column_stack([v01, v00, vc]),
    ])

    facets = _exterior_facets(cells, 2)
    tags = _tag_facets(vertices, facets, length)
    return SimplicialMesh(vertices, cells, facets, tags)


def _disk_points(radius: float, rings: int) -> np.ndarray:
    """Spiderweb point set for a disk: ring i of 6i points at radius i*r/m."""
    pts = [(0.0, 0.0)]
    for i in range(1, rings + 1):
        r = radius * i / rings
        ang = 2.0 * np.pi * np.arange(6 * i) / (6 * i)
        pts.extend(zip(r * np.cos(ang), r * np.sin(ang)))
    return np.array(pts)


def build_pipe_3d(radius: float, length: float, target_h: float) -> SimplicialMesh:
    """Tetrahedral mesh of the pipe 0 < x1 < length with circular section.

    The cross-section is the disk of given radius centered at
    (x2, x3) = (radius, radius).  A spiderweb disk triangulation is
    extruded along x1 into prism layers; each prism is split into three
    tetrahedra using the ascending-global-index rule, which makes the
    split conforming across neighboring prisms.
    """
    if radius <= 0 or length <= 0 or target_h <= 0:
        raise ValueError("radius, length and target_h must be positive")

    from scipy.spatial import Delaunay

    rings = max(1, round(radius / target_h))
    disk = _disk_points(radius, rings)
    tri = Delaunay(disk).simplices  # convex hull of the point set = polygon
    n_disk = len(disk)

    n_layers = max(1, round(length / target_h))
    x1 = np.linspace(0.0, length, n_layers + 1)
    vertices = np.column_stack([
        np.repeat(x1, n_disk),
        np.tile(disk[:, 0] + radius, n_layers + 1),
        np.tile(disk[:, 1] + radius, n_layers + 1),
    ])

    tri = np.sort(tri, axis=1)  # p < q < r: fixes prism diagonals globally
    p, q, r = tri[:, 0], tri[:, 1], tri[:, 2]
    layers = np.arange(n_layers)[:, None] * n_disk
    p0, q0, r0 = p + layers, q + layers, r + layers
    p1, q1, r1 = p0 + n_disk, q0 + n_disk, r0 + n_disk
    cells = np.vstack([
        np.stack([p0, q0, r0, p1], axis=2).reshape(-1, 4),
        np.stack([q0, r0, p1, q1], axis=2).reshape(-1, 4),
        np.stack([r0, p1, q1, r1], axis=2).reshape(-1, 4),
    ])

    facets = _exterior_facets(cells, 3)
    tags = _tag_facets(vertices, facets, length)
    return SimplicialMesh(vertices, cells, facets, tags)


# ---------------------------------------------------------------- refinement

def refine_uniform(mesh: SimplicialMesh) -> SimplicialMesh:
    """Red refinement: every cell is split into 2^dim children.

    New vertices are the edge midpoints, appended after the original
    vertices in mesh edge order.  Boundary facets are subdivided with
    inherited tags.
    """
    d = mesh.dim
    edges = mesh.edges
    vertices = np.vstack([mesh.vertices, mesh.vertices[edges].mean(axis=1)])
    mid = mesh.n_vertices + mesh.cell_edges  # (n_c, n_local_edges)
    c = mesh.cells

    if d == 2:
        a, b, cc = c[:, 0], c[:, 1], c[:, 2]
        m01, m02, m12 = mid[:, 0], mid[:, 1], mid[:, 2]
        children = np.vstack([
            np.column_stack([a, m01, m02]),
            np.column_stack([m01, b, m12]),
            np.column_stack([m02, m12, cc]),
            np.column_stack([m01, m12, m02]),
        ])
    else:
        v0, v1, v2, v3 = (c[:, k] for k in range(4))
        m01, m02, m03, m12, m13, m23 = (mid[:, k] for k in range(6))
        corner = [
            np.column_stack([v0, m01, m02, m03]),
            np.column_stack([m01, v1, m12, m13]),
            np.column_stack([m02, m12, v2, m23]),
            np.column_stack([m03, m13, m23, v3]),
        ]
        # Octahedron: split along the shortest of the three diagonals
        # (first-listed wins ties) for better-shaped children.
        diags = np.stack([
            np.linalg.norm(vertices[m01] - vertices[m23], axis=1),
            np.linalg.norm(vertices[m02] - vertices[m13], axis=1),
            np.linalg.norm(vertices[m03] - vertices[m12], axis=1),
        ], axis=1)
        choice = np.argmin(np.round(diags / diags.max() * 1e12), axis=1)
        equators = {
            0: (m01, m23, (m02, m03, m13, m12)),
            1: (m02, m13, (m01, m03, m23, m12)),
            2: (m03, m12, (m01, m02, m23, m13)),
        }
        octa = np.empty((mesh.n_cells, 4, 4), dtype=np.int64)
        for k, (da, db, eq) in equators.items():
            sel = choice == k
            if not np.any(sel):
                continue
            ring = np.stack([e[sel] for e in eq], axis=1)
            for f in range(4):
                octa[sel, f, 0] = da[sel]
                octa[sel, f, 1] = db[sel]
                octa[sel, f, 2] = ring[:, f]
                octa[sel, f, 3] = ring[:, (f + 1) % 4]
        children = np.vstack(corner + [octa.reshape(-1, 4)])

    # subdivide boundary facets
    bf = mesh.boundary_facets
    tags = mesh.boundary_tags
    if d == 2:
        m = mesh.n_vertices + mesh.edge_lookup(bf)
        new_facets = np.vstack([
            np.column_stack([bf[:, 0], m]),
            np.column_stack([m, bf[:, 1]]),
        ])
        new_tags = np.concatenate([tags, tags])
    else:
        pairs = [(0, 1), (0, 2), (1, 2)]
        m = np.stack(
            [mesh.n_vertices + mesh.edge_lookup(bf[:, pr]) for pr in pairs], axis=1)
        fa, fb, fc = bf[:, 0], bf[:, 1], bf[:, 2]
        f01, f02, f12 = m[:, 0], m[:, 1], m[:, 2]
        new_facets = np.vstack([
            np.column_stack([fa, f01, f02]),
            np.column_stack([f01, fb, f12]),
            np.column_stack([f02, f12, fc]),
            np.column_stack([f01, f12, f02]),
        ])
        new_tags = np.concatenate([tags] * 4)

    return SimplicialMesh(vertices, children, new_facets, new_tags,
                          refinement_level=mesh.refinement_level + 1)


def cell_diameter_h(mesh: SimplicialMesh, cell: int) -> float:
    """Mesh-size measure h_K = vol(K)^(1/dim) of one cell."""
    return float(mesh.cell_diameters()[cell])


# --------------------------------------------------------------- text format

def save_mesh_text(mesh: SimplicialMesh, path):
    """Write the plain-text mesh format (see `load_mesh_text`)."""
    lines = ["simplicial-mesh 1",
             f"dim {mesh.dim}",
             f"refinement_level {mesh.refinement_level}",
             f"vertices {mesh.n_vertices}"]
    lines += [" ".join(f"{x:.17g}" for x in v) for v in mesh.vertices]
    lines.append(f"cells {mesh.n_cells}")
    lines += [" ".join(str(i) for i in c) for c in mesh.cells]
    lines.append(f"facets {len(mesh.boundary_facets)}")
    lines += [" ".join(str(i) for i in f) + " " + _TAG_NAMES[BoundaryTag(t)]
              for f, t in zip(mesh.boundary_facets, mesh.boundary_tags)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh_text(path) -> SimplicialMesh:
    """Read the plain-text mesh format.

    Layout (whitespace separated, one record per line)::

        simplicial-mesh 1
        dim D
        refinement_level L
        vertices N
        x y [z]          (N lines)
        cells M
        v0 ... vD        (M lines)
        facets F
        v0 ... v(D-1) tag   (F lines; tag in {inflow, outflow, wall})
    """
    with open(path) as fh:
        raw = [ln.strip() for ln in fh]
    lines = [ln for ln in raw if ln]

    def fail(i, msg):
        raise ValueError(f"{path}: line {i + 1}: {msg}")

    if not lines or lines[0].split() != ["simplicial-mesh", "1"]:
        fail(0, "expected header 'simplicial-mesh 1'")
    try:
        dim = int(lines[1].split()[1])
        level = int(lines[2].split()[1])
        n_v = int(lines[3].split()[1])
    except (IndexError, ValueError):
        fail(1, "malformed header")
    pos = 4
    try:
        vertices = np.array(
            [[float(x) for x in lines[pos + i].split()] for i in range(n_v)])
        pos += n_v
        n_c = int(lines[pos].split()[1])
        pos += 1
        cells = np.array(
            [[int(x) for x in lines[pos + i].split()] for i in range(n_c)])
        pos += n_c
        n_f = int(lines[pos].split()[1])
        pos += 1
        facets, tags = [], []
        for i in range(n_f):
            parts = lines[pos + i].split()
            facets.append([int(x) for x in parts[:-1]])
            tags.append(int(_TAG_FROM_NAME[parts[-1]]))
    except (IndexError, ValueError, KeyError):
        fail(pos, "malformed record")
    if vertices.shape[1] != dim:
        fail(4, f"vertex dimension {vertices.shape[1]} != declared {dim}")
    mesh = SimplicialMesh(vertices, cells, np.array(facets), np.array(tags),
                          refinement_level=level)
    mesh.validate()
    return mesh
