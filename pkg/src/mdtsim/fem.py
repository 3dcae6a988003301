"""Lagrange finite element spaces and vectorized assembly on simplicial meshes.

Supports continuous piecewise linear (degree 1) and quadratic (degree 2)
spaces, scalar or vector valued, with:

* cell and boundary-facet assembly of bilinear/linear forms through a
  small kernel interface (kernels receive tabulated basis data and return
  local element contributions),
* Dirichlet constraint handling by row replacement (optionally symmetric),
* nodal interpolation and L2 projection.

All assembly is vectorized over cells with a fixed summation order, so
results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import _LOCAL_EDGES, BoundaryTag, SimplicialMesh
from .quadrature import quadrature_rule, reference_volume

__all__ = [
    "FESpace",
    "DiscreteField",
    "DirichletConstraint",
    "assemble_matrix",
    "assemble_vector",
    "assemble_boundary_matrix",
    "assemble_boundary_vector",
    "eval_on_facets",
    "grad_on_facets",
    "apply_dirichlet",
    "interpolate",
    "l2_project",
    "mass_kernel",
    "stiffness_kernel",
    "merge_constraints",
]

_REF_VERTICES = {
    2: np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    3: np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                 [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
}


def _barycentric(dim: int, pts: np.ndarray):
    """Barycentric values and constant gradients at reference points."""
    lam = [1.0 - pts.sum(axis=1)] + [pts[:, k] for k in range(dim)]
    dlam = np.vstack([-np.ones(dim), np.eye(dim)])
    return lam, dlam


def reference_basis(dim: int, degree: int, pts: np.ndarray):
    """Tabulate Lagrange basis on the reference simplex.

    Parameters
    ----------
    pts : (n_q, dim) array of reference (cartesian) coordinates.

    Returns
    -------
    vals : (n_q, n_basis)
    grads : (n_q, n_basis, dim)
    """
    lam, dlam = _barycentric(dim, pts)
    nq = len(pts)
    if degree == 1:
        vals = np.stack(lam, axis=1)
        grads = np.broadcast_to(dlam, (nq, dim + 1, dim)).copy()
        return vals, grads
    if degree == 2:
        edges = _LOCAL_EDGES[dim]
        nb = (dim + 1) + len(edges)
        vals = np.empty((nq, nb))
        grads = np.empty((nq, nb, dim))
        for i in range(dim + 1):
            vals[:, i] = lam[i] * (2.0 * lam[i] - 1.0)
            grads[:, i] = (4.0 * lam[i] - 1.0)[:, None] * dlam[i]
        for e, (a, b) in enumerate(edges):
            j = dim + 1 + e
            vals[:, j] = 4.0 * lam[a] * lam[b]
            grads[:, j] = 4.0 * (lam[a][:, None] * dlam[b] + lam[b][:, None] * dlam[a])
        return vals, grads
    raise ValueError(f"unsupported degree {degree}")


@dataclass(frozen=True)
class DirichletConstraint:
    """Prescribed values at a set of global dofs."""

    dofs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        dofs = np.asarray(self.dofs, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        if len(np.unique(dofs)) != len(dofs):
            raise ValueError("constraint dofs must be unique")
        if not np.all(np.isfinite(values)):
            raise ValueError("constraint values must be finite")
        object.__setattr__(self, "dofs", dofs)
        object.__setattr__(self, "values", values)


def merge_constraints(*constraints: DirichletConstraint) -> DirichletConstraint:
    """Combine constraints; on overlapping dofs the first one wins."""
    dofs = np.concatenate([c.dofs for c in constraints])
    values = np.concatenate([c.values for c in constraints])
    _, first = np.unique(dofs, return_index=True)
    return DirichletConstraint(dofs[first], values[first])


class FESpace:
    """Continuous Lagrange space of degree 1 or 2, scalar or vector valued.

    Global dof layout is component-major: dof ``c * n_scalar_dofs + s``
    is component ``c`` of scalar basis function ``s``.  Scalar dofs are
    vertex values (degree 1) plus edge-midpoint values (degree 2, appended
    after the vertices in mesh edge order).
    """

    def __init__(self, mesh: SimplicialMesh, degree: int, components: int = 1):
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        if components < 1:
            raise ValueError("components must be positive")
        self.mesh = mesh
        self.degree = degree
        self.components = components
        if degree == 1:
            self.scalar_cell_dofs = mesh.cells
            self.dof_points = mesh.vertices
        else:
            self.scalar_cell_dofs = np.hstack(
                [mesh.cells, mesh.n_vertices + mesh.cell_edges])
            self.dof_points = np.vstack(
                [mesh.vertices, mesh.vertices[mesh.edges].mean(axis=1)])
        self.n_scalar_dofs = len(self.dof_points)
        self.n_dofs = components * self.n_scalar_dofs
        self.n_loc_scalar = self.scalar_cell_dofs.shape[1]
        self.n_loc = components * self.n_loc_scalar
        if components == 1:
            self.cell_dofs = self.scalar_cell_dofs
        else:
            self.cell_dofs = np.hstack(
                [self.scalar_cell_dofs + c * self.n_scalar_dofs
                 for c in range(components)])
        self._tabs: dict = {}

    # ------------------------------------------------------------------ info
    @property
    def dim(self) -> int:
        return self.mesh.dim

    def new_field(self) -> "DiscreteField":
        return DiscreteField(self, np.zeros(self.n_dofs))

    # ------------------------------------------------------------- boundaries
    def boundary_scalar_dofs(self, tags) -> np.ndarray:
        """Sorted unique scalar dofs lying on facets with the given tags."""
        tags = [tags] if isinstance(tags, (int, BoundaryTag)) else list(tags)
        mesh = self.mesh
        idx = np.concatenate([mesh.facets_where(t) for t in tags]) \
            if tags else np.array([], dtype=np.int64)
        facets = mesh.boundary_facets[idx]
        dofs = [facets.ravel()]
        if self.degree == 2 and len(facets):
            if mesh.dim == 2:
                dofs.append(mesh.n_vertices + mesh.edge_lookup(facets))
            else:
                for pr in ((0, 1), (0, 2), (1, 2)):
                    dofs.append(mesh.n_vertices + mesh.edge_lookup(facets[:, pr]))
        return np.unique(np.concatenate(dofs)) if len(facets) else np.array([], dtype=np.int64)

    def dirichlet(self, tags, fn=None) -> DirichletConstraint:
        """Constraint fixing all components on the tagged boundary part.

        `fn` maps an (n, dim) array of dof coordinates to values of shape
        (n,) for scalar spaces or (n, components) for vector spaces;
        ``fn=None`` prescribes zero.
        """
        sdofs = self.boundary_scalar_dofs(tags)
        pts = self.dof_points[sdofs]
        if fn is None:
            vals = np.zeros((len(sdofs), self.components))
        else:
            vals = np.asarray(fn(pts), dtype=float)
            if self.components == 1:
                vals = vals.reshape(len(sdofs), 1)
        dofs = np.concatenate(
            [sdofs + c * self.n_scalar_dofs for c in range(self.components)])
        return DirichletConstraint(dofs, vals.T.ravel())

    # ------------------------------------------------------------ tabulation
    def _scalar_tab(self, pts_key, pts):
        key = ("s", pts_key)
        if key not in self._tabs:
            self._tabs[key] = reference_basis(self.dim, self.degree, pts)
        return self._tabs[key]

    def tabulate(self, order: int):
        """Reference basis values/gradients at the volume quadrature points."""
        bary, w = quadrature_rule(self.dim, order)
        return self._scalar_tab(("q", order), np.ascontiguousarray(bary[:, 1:]))


@dataclass
class DiscreteField:
    """Coefficient vector over a finite element space."""

    space: FESpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.n_dofs,):
            raise ValueError("coefficient length does not match space")

    def copy(self) -> "DiscreteField":
        return DiscreteField(self.space, self.coeffs.copy())

    def component_coeffs(self) -> np.ndarray:
        """Coefficients reshaped to (components, n_scalar_dofs)."""
        return self.coeffs.reshape(self.space.components, self.space.n_scalar_dofs)


# ------------------------------------------------------------------ sampling

def _cell_coeffs(field: DiscreteField) -> np.ndarray:
    """Per-cell coefficient tensor (n_c, n_loc_scalar, components)."""
    comp = field.component_coeffs()  # (C, n_scalar)
    return np.transpose(comp[:, field.space.scalar_cell_dofs], (1, 2, 0))


def eval_at_ref_points(field: DiscreteField, ref_pts: np.ndarray) -> np.ndarray:
    """Evaluate on every cell at shared reference points.

    Returns (n_c, n_q) for scalar spaces, (n_c, n_q, components) otherwise.
    """
    vals, _ = reference_basis(field.space.dim, field.space.degree, ref_pts)
    out = np.einsum("qb,cbk->cqk", vals, _cell_coeffs(field))
    return out[..., 0] if field.space.components == 1 else out


def grad_at_ref_points(field: DiscreteField, ref_pts: np.ndarray) -> np.ndarray:
    """Physical gradients on every cell at shared reference points.

    Returns (n_c, n_q, dim) for scalar spaces, (n_c, n_q, components, dim)
    otherwise.
    """
    _, grads = reference_basis(field.space.dim, field.space.degree, ref_pts)
    ref = np.einsum("qbd,cbk->cqkd", grads, _cell_coeffs(field))
    phys = np.einsum("cqkd,ced->cqke", ref, field.space.mesh.inv_jacobians_t)
    return phys[:, :, 0, :] if field.space.components == 1 else phys


def quad_points(mesh: SimplicialMesh, order: int):
    """Physical quadrature points and scaled weights for volume assembly.

    Returns x (n_c, n_q, dim) and w (n_c, n_q) with w summing to cell
    volumes.
    """
    bary, wts = quadrature_rule(mesh.dim, order)
    ref = np.ascontiguousarray(bary[:, 1:])
    x = np.einsum("cde,qe->cqd", mesh.jacobians, ref) \
        + mesh.vertices[mesh.cells[:, 0]][:, None, :]
    w = wts[None, :] * mesh.jacobian_dets[:, None]
    return x, w


def eval_at_quad(field: DiscreteField, order: int) -> np.ndarray:
    bary, _ = quadrature_rule(field.space.dim, order)
    return eval_at_ref_points(field, np.ascontiguousarray(bary[:, 1:]))


def grad_at_quad(field: DiscreteField, order: int) -> np.ndarray:
    bary, _ = quadrature_rule(field.space.dim, order)
    return grad_at_ref_points(field, np.ascontiguousarray(bary[:, 1:]))


# ------------------------------------------------------------------ assembly

@dataclass
class CellContext:
    """Tabulated data handed to volume kernels.

    Shapes (C = components; the component axis is absent for scalar
    spaces): ``test_vals`` (n_c, n_q, n_loc[, C]), ``test_grads``
    (n_c, n_q, n_loc[, C], dim); likewise for trial.  ``x`` are physical
    quadrature points (n_c, n_q, dim) and ``w`` the quadrature weights
    times the Jacobian determinant (n_c, n_q).
    """

    mesh: SimplicialMesh
    x: np.ndarray
    w: np.ndarray
    test_vals: np.ndarray = None
    test_grads: np.ndarray = None
    trial_vals: np.ndarray = None
    trial_grads: np.ndarray = None


def _expand_vector_vals(vals, components):
    """Expand scalar basis values to a vector basis (component-major)."""
    nq, nb = vals.shape
    v = np.zeros((nq, components * nb, components))
    for c in range(components):
        v[:, c * nb:(c + 1) * nb, c] = vals
    return v


def _cell_tab(space: FESpace, order: int):
    """Per-cell basis values/physical gradients for volume assembly."""
    vals, ref_grads = space.tabulate(order)
    mesh = space.mesh
    nc = mesh.n_cells
    grads = np.einsum("qbd,ced->cqbe", ref_grads, mesh.inv_jacobians_t)
    if space.components == 1:
        return np.broadcast_to(vals, (nc,) + vals.shape), grads
    v = _expand_vector_vals(vals, space.components)
    nb = space.n_loc_scalar
    g = np.zeros((nc,) + v.shape + (space.dim,))
    for c in range(space.components):
        g[:, :, c * nb:(c + 1) * nb, c, :] = grads
    return np.broadcast_to(v, (nc,) + v.shape), g


def _scatter_matrix(rows_dofs, cols_dofs, local, shape):
    n_c, nt, ns = local.shape
    rows = np.repeat(rows_dofs, ns, axis=1).ravel()
    cols = np.tile(cols_dofs, (1, nt)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=shape)
    return mat.tocsr()


def assemble_matrix(test: FESpace, trial: FESpace, kernel, order: int) -> sp.csr_matrix:
    """Assemble a bilinear form over all cells into a CSR matrix.

    `kernel(ctx)` returns local matrices of shape (n_c, test.n_loc,
    trial.n_loc).
    """
    mesh = test.mesh
    x, w = quad_points(mesh, order)
    ctx = CellContext(mesh, x, w)
    ctx.test_vals, ctx.test_grads = _cell_tab(test, order)
    if trial is test:
        ctx.trial_vals, ctx.trial_grads = ctx.test_vals, ctx.test_grads
    else:
        ctx.trial_vals, ctx.trial_grads = _cell_tab(trial, order)
    local = kernel(ctx)
    return _scatter_matrix(test.cell_dofs, trial.cell_dofs, local,
                           (test.n_dofs, trial.n_dofs))


def assemble_vector(test: FESpace, kernel, order: int) -> np.ndarray:
    """Assemble a linear form; `kernel(ctx)` returns (n_c, test.n_loc)."""
    mesh = test.mesh
    x, w = quad_points(mesh, order)
    ctx = CellContext(mesh, x, w)
    ctx.test_vals, ctx.test_grads = _cell_tab(test, order)
    local = kernel(ctx)
    out = np.zeros(test.n_dofs)
    np.add.at(out, test.cell_dofs.ravel(), local.ravel())
    return out


@dataclass
class FacetContext:
    """Tabulated data handed to boundary kernels.

    ``normals`` are outward unit normals (n_f, dim); ``w`` includes the
    facet measure; basis arrays are shaped like in `CellContext` with
    n_f in place of n_c.  ``cells`` gives the parent cell per facet.
    """

    mesh: SimplicialMesh
    x: np.ndarray
    w: np.ndarray
    normals: np.ndarray
    cells: np.ndarray
    test_vals: np.ndarray = None
    test_grads: np.ndarray = None
    trial_vals: np.ndarray = None
    trial_grads: np.ndarray = None


def _facet_ref_points(mesh: SimplicialMesh, facet_idx: np.ndarray, order: int):
    """Reference coordinates (in the parent cell) of facet quad points."""
    d = mesh.dim
    bary, wts = quadrature_rule(d - 1, order)
    facets = mesh.boundary_facets[facet_idx]
    parents = mesh.boundary_parent_cells[facet_idx]
    cells = mesh.cells[parents]
    # local index of each facet vertex within its parent cell
    loc = np.argmax(cells[:, None, :] == facets[:, :, None], axis=2)
    ref_verts = _REF_VERTICES[d][loc]            # (n_f, d, dim)
    ref_pts = np.einsum("qv,fvd->fqd", bary, ref_verts)
    w = wts[None, :] * (mesh.boundary_measures[facet_idx]
                        / reference_volume(d - 1))[:, None]
    return ref_pts, w, parents


def _facet_tab(space: FESpace, ref_pts, parents):
    nf, nq, d = ref_pts.shape
    vals, ref_grads = reference_basis(space.dim, space.degree,
                                      ref_pts.reshape(-1, d))
    nb = space.n_loc_scalar
    vals = vals.reshape(nf, nq, nb)
    ref_grads = ref_grads.reshape(nf, nq, nb, d)
    grads = np.einsum("fqbd,fed->fqbe", ref_grads,
                      space.mesh.inv_jacobians_t[parents])
    if space.components == 1:
        return vals, grads
    C = space.components
    v = np.zeros((nf, nq, C * nb, C))
    g = np.zeros((nf, nq, C * nb, C, d))
    for c in range(C):
        sl = slice(c * nb, (c + 1) * nb)
        v[:, :, sl, c] = vals
        g[:, :, sl, c, :] = grads
    return v, g


def _facet_context(mesh, tags, order, test, trial=None):
    tags = [tags] if isinstance(tags, (int, BoundaryTag)) else list(tags)
    idx = np.concatenate([mesh.facets_where(t) for t in tags])
    idx = np.sort(idx)
    ref_pts, w, parents = _facet_ref_points(mesh, idx, order)
    x = np.einsum("fde,fqe->fqd", mesh.jacobians[parents], ref_pts) \
        + mesh.vertices[mesh.cells[parents, 0]][:, None, :]
    ctx = FacetContext(mesh, x, w, mesh.boundary_normals[idx], parents)
    ctx.test_vals, ctx.test_grads = _facet_tab(test, ref_pts, parents)
    if trial is not None:
        if trial is test:
            ctx.trial_vals, ctx.trial_grads = ctx.test_vals, ctx.test_grads
        else:
            ctx.trial_vals, ctx.trial_grads = _facet_tab(trial, ref_pts, parents)
    return ctx, parents, idx


def assemble_boundary_matrix(test: FESpace, trial: FESpace, kernel, tags,
                             order: int) -> sp.csr_matrix:
    """Assemble a bilinear form over tagged boundary facets."""
    ctx, parents, _ = _facet_context(test.mesh, tags, order, test, trial)
    local = kernel(ctx)
    return _scatter_matrix(test.cell_dofs[parents], trial.cell_dofs[parents],
                           local, (test.n_dofs, trial.n_dofs))


def assemble_boundary_vector(test: FESpace, kernel, tags, order: int) -> np.ndarray:
    """Assemble a linear form over tagged boundary facets."""
    ctx, parents, _ = _facet_context(test.mesh, tags, order, test)
    local = kernel(ctx)
    out = np.zeros(test.n_dofs)
    np.add.at(out, test.cell_dofs[parents].ravel(), local.ravel())
    return out


def eval_on_facets(field: DiscreteField, tags, order: int) -> np.ndarray:
    """Field values at boundary-facet quadrature points.

    The facet ordering matches `assemble_boundary_matrix` /
    `assemble_boundary_vector` called with the same tags and order.
    Returns (n_f, n_q) for scalar spaces, (n_f, n_q, components)
    otherwise.
    """
    mesh = field.space.mesh
    tags = [tags] if isinstance(tags, (int, BoundaryTag)) else list(tags)
    idx = np.sort(np.concatenate([mesh.facets_where(t) for t in tags]))
    ref_pts, _, parents = _facet_ref_points(mesh, idx, order)
    vals, _ = _facet_tab(field.space, ref_pts, parents)
    coeffs = field.coeffs[field.space.cell_dofs[parents]]
    if field.space.components == 1:
        return np.einsum("fqb,fb->fq", vals, coeffs)
    return np.einsum("fqbk,fb->fqk", vals, coeffs)


def grad_on_facets(field: DiscreteField, tags, order: int) -> np.ndarray:
    """Physical field gradients at boundary-facet quadrature points.

    Returns (n_f, n_q, dim) for scalar spaces, (n_f, n_q, components,
    dim) otherwise; facet ordering as in `eval_on_facets`.
    """
    mesh = field.space.mesh
    tags = [tags] if isinstance(tags, (int, BoundaryTag)) else list(tags)
    idx = np.sort(np.concatenate([mesh.facets_where(t) for t in tags]))
    ref_pts, _, parents = _facet_ref_points(mesh, idx, order)
    _, grads = _facet_tab(field.space, ref_pts, parents)
    coeffs = field.coeffs[field.space.cell_dofs[parents]]
    if field.space.components == 1:
        return np.einsum("fqbd,fb->fqd", grads, coeffs)
    return np.einsum("fqbkd,fb->fqkd", grads, coeffs)


# ---------------------------------------------------------------- constraints

def apply_dirichlet(A: sp.csr_matrix, b: np.ndarray, bc: DirichletConstraint,
                    symmetrize: bool = False):
    """Impose constraints by row replacement; returns a new (A, b).

    With ``symmetrize=True`` the constrained columns are eliminated as
    well (moving their action to the right-hand side), which preserves
    symmetry of symmetric operators.
    """
    n = A.shape[0]
    keep = np.ones(n)
    keep[bc.dofs] = 0.0
    b = np.asarray(b, dtype=float).copy()
    if symmetrize:
        x_bc = np.zeros(n)
        x_bc[bc.dofs] = bc.values
        b -= A @ x_bc
    D_keep = sp.diags(keep)
    fix = np.zeros(n)
    fix[bc.dofs] = 1.0
    A = D_keep @ A
    if symmetrize:
        A = A @ D_keep
    A = (A + sp.diags(fix)).tocsr()
    A.eliminate_zeros()
    b[bc.dofs] = bc.values
    return A, b


# --------------------------------------------------------------- projections

def interpolate(fn, space: FESpace) -> DiscreteField:
    """Nodal interpolation of a callable (or constant) into the space."""
    pts = space.dof_points
    if callable(fn):
        vals = np.asarray(fn(pts), dtype=float)
    else:
        vals = np.broadcast_to(
            np.asarray(fn, dtype=float),
            (len(pts),) if space.components == 1 else (len(pts), space.components)).copy()
    if space.components == 1:
        return DiscreteField(space, vals.reshape(-1).copy())
    return DiscreteField(space, vals.T.ravel().copy())


def mass_kernel(coef=None):
    """Kernel for ∫ c φ_trial φ_test (componentwise dot for vectors)."""
    def kernel(ctx):
        if ctx.test_vals.ndim == 4:
            prod = np.einsum("cqik,cqjk->cqij", ctx.test_vals, ctx.trial_vals)
        else:
            prod = np.einsum("cqi,cqj->cqij", ctx.test_vals, ctx.trial_vals)
        w = ctx.w if coef is None else ctx.w * _coef_values(coef, ctx)
        return np.einsum("cq,cqij->cij", w, prod)
    return kernel


def stiffness_kernel(coef=None):
    """Kernel for ∫ c ∇φ_trial : ∇φ_test."""
    def kernel(ctx):
        if ctx.test_grads.ndim == 5:
            prod = np.einsum("cqikd,cqjkd->cqij", ctx.test_grads, ctx.trial_grads)
        else:
            prod = np.einsum("cqid,cqjd->cqij", ctx.test_grads, ctx.trial_grads)
        w = ctx.w if coef is None else ctx.w * _coef_values(coef, ctx)
        return np.einsum("cq,cqij->cij", w, prod)
    return kernel


def _coef_values(coef, ctx):
    if callable(coef):
        return np.asarray(coef(ctx.x), dtype=float)
    arr = np.asarray(coef, dtype=float)
    return arr if arr.ndim else np.full(ctx.w.shape, float(arr))


def l2_project(fn, space: FESpace, order: int | None = None) -> DiscreteField:
    """L2 projection of a callable ``fn(x) -> values`` into the space."""
    from scipy.sparse.linalg import splu

    order = order or 2 * space.degree
    M = assemble_matrix(space, space, mass_kernel(), order)

    def rhs_kernel(ctx):
        f = np.asarray(fn(ctx.x.reshape(-1, space.dim)), dtype=float)
        f = f.reshape(ctx.x.shape[:2] + ((space.components,) if space.components > 1 else ()))
        if space.components == 1:
            return np.einsum("cq,cq,cqi->ci", ctx.w, f, ctx.test_vals)
        return np.einsum("cq,cqk,cqik->ci", ctx.w, f, ctx.test_vals)

    b = assemble_vector(space, rhs_kernel, order)
    coeffs = splu(M.tocsc()).solve(b)
    return DiscreteField(space, coeffs)
