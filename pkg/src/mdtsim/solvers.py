"""Sparse iterative solvers and a damped Newton driver.

Hand-rolled preconditioned CG and restarted GMRES operating on scipy
sparse matrices, a pluggable preconditioner contract (jacobi, ilu0,
block pressure-convection-diffusion for saddle-point systems), and a
Newton iteration with relative-update stopping and backtracking
damping.  GMRES uses right preconditioning so reported residuals are
true residuals of the original system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "LinearSolverConfig",
    "NewtonConfig",
    "SolveReport",
    "IndefiniteOperatorError",
    "FactorizationError",
    "LinearSolverError",
    "PCDOperators",
    "make_preconditioner",
    "solve_cg",
    "solve_gmres",
    "solve_linear",
    "newton_solve",
]


class IndefiniteOperatorError(RuntimeError):
    """CG breakdown: the operator (or preconditioner) is not positive
    definite on the current search direction."""


class FactorizationError(RuntimeError):
    """Preconditioner factorization failed (zero pivot / zero diagonal)."""


class LinearSolverError(RuntimeError):
    """An inner linear solve failed to converge where a solution is
    required to proceed."""

    def __init__(self, message: str, report: "SolveReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class SolveReport:
    """Outcome of an iterative solve."""

    iterations: int
    final_residual: float
    converged: bool


@dataclass(frozen=True)
class LinearSolverConfig:
    """Krylov solver settings.

    ``preconditioner`` names a built-in preconditioner constructed from
    the system matrix ("none", "jacobi", "ilu0"); composite
    preconditioners (block_pcd) must be passed to the solver
    explicitly.
    """

    method: str = "cg"
    rel_tol: float = 1e-10
    abs_tol: float = 1e-14
    max_iters: int = 1000
    restart: int = 50
    preconditioner: str = "jacobi"

    def __post_init__(self):
        if self.method not in ("cg", "gmres"):
            raise ValueError(f"unknown linear solver method '{self.method}'")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.restart < 1:
            raise ValueError("restart must be at least 1")


@dataclass(frozen=True)
class NewtonConfig:
    """Newton iteration settings.

    Stops when the relative update ||dx|| / max(||x||, 1) drops below
    ``rel_update_tol`` or the residual norm falls below
    ``abs_res_tol``.  ``damping`` is "none" or "backtracking" (halve
    the step while the residual norm does not decrease, down to 2^-10).
    """

    rel_update_tol: float = 1e-8
    max_iters: int = 30
    damping: str = "backtracking"
    abs_res_tol: float = 0.0

    def __post_init__(self):
        if self.rel_update_tol <= 0:
            raise ValueError("rel_update_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.damping not in ("none", "backtracking"):
            raise ValueError(f"unknown damping strategy '{self.damping}'")


_MIN_DAMPING = 2.0 ** -10


# ------------------------------------------------------------ preconditioners


def _jacobi(matrix):
    diag = np.asarray(matrix.diagonal(), dtype=float)
    if np.any(diag == 0.0):
        raise FactorizationError("jacobi preconditioner: zero diagonal entry")
    inv = 1.0 / diag

    def apply(r):
        return inv * r

    return apply


def _ilu0_factor(matrix):
    """In-pattern incomplete LU (no fill), IKJ ordering on sorted CSR."""
    a = sp.csr_matrix(matrix, copy=True).astype(float)
    a.sort_indices()
    n = a.shape[0]
    indptr, indices, data = a.indptr, a.indices, a.data
    diag_pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        s, e = indptr[i], indptr[i + 1]
        pos = np.searchsorted(indices[s:e], i)
        if pos == e - s or indices[s + pos] != i:
            raise FactorizationError(f"ilu0: missing diagonal entry in row {i}")
        diag_pos[i] = s + pos
    for i in range(n):
        s, e = indptr[i], indptr[i + 1]
        row_cols = indices[s:e]
        for t in range(s, diag_pos[i]):
            k = indices[t]
            pivot = data[diag_pos[k]]
            if pivot == 0.0:
                raise FactorizationError(f"ilu0: zero pivot in row {k}")
            lik = data[t] / pivot
            data[t] = lik
            ks, ke = diag_pos[k] + 1, indptr[k + 1]
            if ks == ke:
                continue
            cols_k = indices[ks:ke]
            pos = s + np.searchsorted(row_cols, cols_k)
            hit = (pos < e) & (indices[np.minimum(pos, e - 1)] == cols_k)
            data[pos[hit]] -= lik * data[ks:ke][hit]
    if np.any(data[diag_pos] == 0.0):
        raise FactorizationError("ilu0: zero pivot on factor diagonal")
    rows = np.repeat(np.arange(n), np.diff(indptr))
    low = indices < rows
    lower = sp.csr_matrix((data[low], (rows[low], indices[low])), shape=(n, n))
    lower = (lower + sp.eye(n, format="csr")).tocsr()
    upper = sp.csr_matrix((data[~low], (rows[~low], indices[~low])), shape=(n, n))
    lower.sort_indices()
    upper.sort_indices()
    return lower, upper


def _ilu0(matrix):
    lower, upper = _ilu0_factor(matrix)

    def apply(r):
        y = spla.spsolve_triangular(lower, r, lower=True, unit_diagonal=True)
        return spla.spsolve_triangular(upper, y, lower=False)

    return apply


@dataclass
class PCDOperators:
    """Assembled blocks for the pressure-convection-diffusion
    preconditioner of the saddle-point system [[F, G], [D, 0]].

    ``f_block`` is the velocity convection-diffusion(-reaction) block
    (with boundary conditions applied), ``grad_block`` the
    velocity-pressure coupling G, ``mass_p`` / ``stiff_p`` the pressure
    mass and Laplacian matrices, and ``conv_diff_p`` the pressure-space
    convection-diffusion operator approximating F on pressures.  The
    Schur complement is approximated by mass_p^-1 conv_diff_p
    stiff_p^-1 applied to the pressure residual.
    """

    f_block: sp.spmatrix
    grad_block: sp.spmatrix
    mass_p: sp.spmatrix
    stiff_p: sp.spmatrix
    conv_diff_p: sp.spmatrix


def _pin_dof(matrix, dof=0):
    """Replace one row/column by the identity to fix a Neumann nullspace."""
    a = sp.lil_matrix(matrix)
    a[dof, :] = 0.0
    a[:, dof] = 0.0
    a[dof, dof] = 1.0
    return a.tocsc()


def _block_pcd(ops: PCDOperators):
    n_v = ops.f_block.shape[0]
    lu_f = spla.splu(sp.csc_matrix(ops.f_block))
    lu_mp = spla.splu(sp.csc_matrix(ops.mass_p))
    # Pin the same pressure dof in both Laplacian and convection-diffusion
    # operators: the pure-Neumann pressure Laplacian is singular, and an
    # unpinned conv_diff_p would reintroduce its nullspace into the
    # composite apply.
    lu_ap = spla.splu(_pin_dof(ops.stiff_p))
    fp = sp.csr_matrix(_pin_dof(ops.conv_diff_p))
    grad = sp.csr_matrix(ops.grad_block)

    def apply(r):
        r_v, r_p = r[:n_v], r[n_v:]
        p = lu_mp.solve(fp @ lu_ap.solve(r_p))
        v = lu_f.solve(r_v - grad @ p)
        return np.concatenate([v, p])

    return apply


def make_preconditioner(kind: str, context):
    """Build a preconditioner apply-function.

    ``context`` is the system matrix for "none"/"jacobi"/"ilu0" and a
    :class:`PCDOperators` bundle for "block_pcd".
    """
    if kind == "none":
        return lambda r: r
    if kind == "jacobi":
        return _jacobi(context)
    if kind == "ilu0":
        return _ilu0(context)
    if kind == "block_pcd":
        return _block_pcd(context)
    raise ValueError(f"unknown preconditioner kind '{kind}'")


def _resolve_preconditioner(matrix, cfg: LinearSolverConfig, precond):
    if precond is not None:
        return precond
    if cfg.preconditioner in ("none", "jacobi", "ilu0"):
        return make_preconditioner(cfg.preconditioner, matrix)
    raise ValueError(
        f"preconditioner '{cfg.preconditioner}' needs explicit operators; "
        "pass an apply-function to the solver")


# ------------------------------------------------------------------- krylov


def solve_cg(matrix, rhs, cfg: LinearSolverConfig, precond=None, x0=None):
    """Preconditioned conjugate gradients for SPD systems.

    Returns ``(x, SolveReport)``.  Raises
    :class:`IndefiniteOperatorError` on breakdown (p^T A p <= 0 or a
    nonpositive preconditioned inner product).
    """
    rhs = np.asarray(rhs, dtype=float)
    apply_m = _resolve_preconditioner(matrix, cfg, precond)
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float)
    tol = max(cfg.rel_tol * np.linalg.norm(rhs), cfg.abs_tol)
    r = rhs - matrix @ x
    res = np.linalg.norm(r)
    if res <= tol:
        return x, SolveReport(0, res, True)
    z = apply_m(r)
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, cfg.max_iters + 1):
        if rz <= 0.0:
            raise IndefiniteOperatorError(
                f"cg: preconditioned product r^T z = {rz:.3e} <= 0")
        ap = matrix @ p
        pap = float(p @ ap)
        if pap <= 0.0:
            raise IndefiniteOperatorError(
                f"cg: curvature p^T A p = {pap:.3e} <= 0 at iteration {it}")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = np.linalg.norm(r)
        if res <= tol:
            return x, SolveReport(it, res, True)
        z = apply_m(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, SolveReport(cfg.max_iters, res, False)


def solve_gmres(matrix, rhs, cfg: LinearSolverConfig, precond=None, x0=None):
    """Restarted GMRES with right preconditioning.

    Modified Gram-Schmidt Arnoldi with Givens-rotation least squares;
    residual norms are true residuals of the original system.  A full
    restart cycle without residual decrease reports non-convergence
    (stagnation).
    """
    rhs = np.asarray(rhs, dtype=float)
    apply_m = _resolve_preconditioner(matrix, cfg, precond)
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float)
    n = rhs.size
    tol = max(cfg.rel_tol * np.linalg.norm(rhs), cfg.abs_tol)
    total = 0
    cycle_start_res = np.inf
    while True:
        r = rhs - matrix @ x
        beta = np.linalg.norm(r)
        if beta <= tol:
            return x, SolveReport(total, beta, True)
        if total >= cfg.max_iters:
            return x, SolveReport(total, beta, False)
        if beta >= cycle_start_res * (1.0 - 1e-14):
            return x, SolveReport(total, beta, False)
        cycle_start_res = beta
        m = min(cfg.restart, cfg.max_iters - total)
        basis = np.empty((m + 1, n))
        hess = np.zeros((m + 1, m))
        cs = np.empty(m)
        sn = np.empty(m)
        g = np.zeros(m + 1)
        g[0] = beta
        basis[0] = r / beta
        j_used = 0
        for j in range(m):
            w = matrix @ apply_m(basis[j])
            for i in range(j + 1):
                hess[i, j] = basis[i] @ w
                w -= hess[i, j] * basis[i]
            hnorm = np.linalg.norm(w)
            hess[j + 1, j] = hnorm
            for i in range(j):
                hi, hj = hess[i, j], hess[i + 1, j]
                hess[i, j] = cs[i] * hi + sn[i] * hj
                hess[i + 1, j] = -sn[i] * hi + cs[i] * hj
            denom = np.hypot(hess[j, j], hess[j + 1, j])
            cs[j] = hess[j, j] / denom if denom else 1.0
            sn[j] = hess[j + 1, j] / denom if denom else 0.0
            hess[j, j] = denom
            hess[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            total += 1
            j_used = j + 1
            if abs(g[j + 1]) <= tol or hnorm <= 1e-14 * beta:
                break
            basis[j + 1] = w / hnorm
        y = np.zeros(j_used)
        for i in range(j_used - 1, -1, -1):
            y[i] = (g[i] - hess[i, i + 1:j_used] @ y[i + 1:j_used]) / hess[i, i]
        x = x + apply_m(basis[:j_used].T @ y)


def solve_linear(matrix, rhs, cfg: LinearSolverConfig, precond=None, x0=None):
    """Dispatch to CG or GMRES according to ``cfg.method``."""
    if cfg.method == "cg":
        return solve_cg(matrix, rhs, cfg, precond=precond, x0=x0)
    return solve_gmres(matrix, rhs, cfg, precond=precond, x0=x0)


# ------------------------------------------------------------------- newton


def newton_solve(residual, jacobian, x0, cfg: NewtonConfig,
                 lin: LinearSolverConfig, precond_factory=None):
    """Damped Newton iteration.

    ``residual(x)`` returns the residual vector, ``jacobian(x)`` the
    sparse Jacobian.  ``precond_factory(J, x)``, when given, builds the
    preconditioner for each linearized solve; otherwise the
    preconditioner named in ``lin`` is built from the Jacobian.
    Returns ``(x, SolveReport)`` where ``iterations`` counts linear
    solves; a failed inner solve raises :class:`LinearSolverError`.
    """
    x = np.array(x0, dtype=float)
    f = np.asarray(residual(x), dtype=float)
    fnorm = np.linalg.norm(f)
    for it in range(1, cfg.max_iters + 1):
        if fnorm <= cfg.abs_res_tol:
            return x, SolveReport(it - 1, fnorm, True)
        jac = jacobian(x)
        precond = precond_factory(jac, x) if precond_factory is not None else None
        delta, rep = solve_linear(jac, -f, lin, precond=precond)
        if not rep.converged:
            raise LinearSolverError(
                f"newton: linearized solve stalled at iteration {it} "
                f"(residual {rep.final_residual:.3e} after {rep.iterations} "
                "Krylov iterations)", rep)
        step = 1.0
        x_new = x + delta
        f_new = np.asarray(residual(x_new), dtype=float)
        fnorm_new = np.linalg.norm(f_new)
        if cfg.damping == "backtracking":
            while fnorm_new >= fnorm and step > _MIN_DAMPING:
                step *= 0.5
                x_new = x + step * delta
                f_new = np.asarray(residual(x_new), dtype=float)
                fnorm_new = np.linalg.norm(f_new)
        x, f, fnorm = x_new, f_new, fnorm_new
        update = step * np.linalg.norm(delta) / max(np.linalg.norm(x), 1.0)
        if update <= cfg.rel_update_tol:
            return x, SolveReport(it, fnorm, True)
    return x, SolveReport(cfg.max_iters, fnorm, False)
