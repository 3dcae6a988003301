"""Krylov solvers, preconditioners, and the damped Newton driver."""

import numpy as np
import pytest
import scipy.sparse as sp

from mdtsim.solvers import (IndefiniteOperatorError, LinearSolverConfig,
                            NewtonConfig, make_preconditioner, newton_solve,
                            solve_cg, solve_gmres, solve_linear)


def _random_spd(n, rng):
    a = rng.normal(size=(n, n))
    return sp.csr_matrix(a @ a.T + n * np.eye(n))


def test_cg_matches_dense_solve():
    rng = np.random.default_rng(0)
    a = _random_spd(40, rng)
    b = rng.normal(size=40)
    x, rep = solve_cg(a, b, LinearSolverConfig(rel_tol=1e-12))
    assert rep.converged
    assert np.allclose(x, np.linalg.solve(a.toarray(), b), atol=1e-8)


def test_cg_rejects_indefinite():
    # first search direction has negative curvature
    a = sp.csr_matrix(np.diag([1.0, -1.0]))
    with pytest.raises(IndefiniteOperatorError):
        solve_cg(a, np.array([0.0, 1.0]),
                 LinearSolverConfig(preconditioner="none"))


def test_gmres_matches_dense_solve():
    rng = np.random.default_rng(1)
    a = sp.csr_matrix(rng.normal(size=(30, 30)) + 6 * np.eye(30))
    b = rng.normal(size=30)
    cfg = LinearSolverConfig(method="gmres", rel_tol=1e-12)
    x, rep = solve_gmres(a, b, cfg)
    assert rep.converged
    assert np.allclose(x, np.linalg.solve(a.toarray(), b), atol=1e-8)


def test_gmres_small_system_exact():
    # 2x2 system solved exactly within two iterations
    a = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 1.0]]))
    b = np.array([1.0, 1.0])
    cfg = LinearSolverConfig(method="gmres", rel_tol=1e-14,
                             preconditioner="none")
    x, rep = solve_gmres(a, b, cfg)
    assert rep.converged
    assert np.allclose(x, [0.0, 1.0], atol=1e-12)


def test_gmres_restart_still_converges():
    rng = np.random.default_rng(2)
    n = 60
    a = sp.csr_matrix(rng.normal(size=(n, n)) * 0.2 + 4 * np.eye(n))
    b = rng.normal(size=n)
    cfg = LinearSolverConfig(method="gmres", rel_tol=1e-10, restart=7,
                             max_iters=4000)
    x, rep = solve_gmres(a, b, cfg)
    assert rep.converged
    assert np.linalg.norm(a @ x - b) <= 1e-9 * np.linalg.norm(b)


def test_preconditioners_reduce_iterations():
    rng = np.random.default_rng(3)
    # ill-conditioned SPD diagonal spread
    d = np.logspace(0, 5, 80)
    q, _ = np.linalg.qr(rng.normal(size=(80, 80)))
    a = sp.csr_matrix(q @ np.diag(d) @ q.T)
    b = rng.normal(size=80)
    cfg = LinearSolverConfig(rel_tol=1e-10, max_iters=5000)
    _, plain = solve_cg(a, b, cfg)
    ilu = make_preconditioner("ilu0", a)
    _, precond = solve_cg(a, b, cfg, precond=ilu)
    assert precond.converged
    assert precond.iterations < plain.iterations


def test_jacobi_preconditioner_smoke():
    a = sp.csr_matrix(np.diag([4.0, 9.0, 16.0]))
    jac = make_preconditioner("jacobi", a)
    assert np.allclose(jac(np.array([4.0, 9.0, 16.0])), [1.0, 1.0, 1.0])


def test_solve_linear_dispatch():
    a = sp.csr_matrix(np.diag([2.0, 3.0]))
    b = np.array([2.0, 6.0])
    x_cg, _ = solve_linear(a, b, LinearSolverConfig(method="cg"))
    x_gm, _ = solve_linear(a, b, LinearSolverConfig(method="gmres"))
    assert np.allclose(x_cg, [1.0, 2.0], atol=1e-10)
    assert np.allclose(x_gm, [1.0, 2.0], atol=1e-10)


# ------------------------------------------------------------------- Newton

def _quadratic_residual(x):
    return np.array([x[0] ** 2 - 2.0, x[0] * x[1] - 1.0])


def _quadratic_jacobian(x):
    return sp.csr_matrix(np.array([[2.0 * x[0], 0.0], [x[1], x[0]]]))


def test_newton_converges_quadratically():
    x, rep = newton_solve(_quadratic_residual, _quadratic_jacobian,
                          np.array([1.0, 1.0]),
                          NewtonConfig(rel_update_tol=1e-12),
                          LinearSolverConfig(method="gmres", rel_tol=1e-14))
    assert rep.converged
    assert rep.iterations <= 8
    assert np.allclose(x, [np.sqrt(2.0), 1.0 / np.sqrt(2.0)], atol=1e-10)


def test_newton_absolute_residual_floor():
    # starting at the root, the residual floor stops iteration immediately
    root = np.array([np.sqrt(2.0), 1.0 / np.sqrt(2.0)])
    x, rep = newton_solve(_quadratic_residual, _quadratic_jacobian, root,
                          NewtonConfig(abs_res_tol=1e-10),
                          LinearSolverConfig(method="gmres"))
    assert rep.converged
    assert np.allclose(x, root)


def test_newton_backtracking_handles_overshoot():
    # steep exponential: undamped Newton from 5 overflows; damping recovers
    def res(x):
        return np.array([np.exp(x[0]) - 1.0])

    def jac(x):
        return sp.csr_matrix(np.array([[np.exp(x[0])]]))

    x, rep = newton_solve(res, jac, np.array([5.0]),
                          NewtonConfig(rel_update_tol=1e-12, max_iters=100,
                                       damping="backtracking"),
                          LinearSolverConfig(method="gmres"))
    assert rep.converged
    assert abs(x[0]) < 1e-10


def test_newton_reports_stall():
    # residual 1 everywhere: no progress possible
    def res(x):
        return np.array([1.0])

    def jac(x):
        return sp.csr_matrix(np.array([[1.0]]))

    x, rep = newton_solve(res, jac, np.array([0.0]),
                          NewtonConfig(max_iters=5),
                          LinearSolverConfig(method="gmres"))
    assert not rep.converged
    assert rep.iterations == 5
