"""Semi-implicit splitting scheme for the coupled magneto two-phase flow.

Each time step solves, in order: (1) the nonlinear magnetostatic
potential with the previous particle density in the permeability
coefficient, (2) an L2 projection of -grad(phi) giving the field
strength, (3) the semi-implicit Navier-Stokes system with mixture
density/viscosity, particle-slip convection correction, and magnetic
body force, and (4) the fully implicit stabilized transport of the
particle volume fraction with field-driven drift, weak inflow data and
convective outflow.  Model variants switch off the particle feedback on
the field (linear magnetostatics) and/or on the fluid (fixed
single-phase flow), in which case the corresponding solves happen once
and are reused.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import constitutive as con
from .constitutive import ModelVariant, NondimParams
from .diagnostics import DiagnosticsRecord, center_of_mass_x1, mass_integral
from .fem import (DirichletConstraint, DiscreteField, FESpace,
                  assemble_boundary_matrix, assemble_boundary_vector,
                  assemble_matrix, assemble_vector, apply_dirichlet,
                  eval_at_quad, eval_on_facets, grad_at_quad, grad_on_facets,
                  interpolate, mass_kernel, merge_constraints, quad_points,
                  stiffness_kernel)
from .mesh import BoundaryTag, SimplicialMesh
from .solvers import (LinearSolverConfig, LinearSolverError, NewtonConfig,
                      PCDOperators, SolveReport, make_preconditioner,
                      newton_solve, solve_cg, solve_linear)

__all__ = [
    "STATIONARY",
    "TimeGrid",
    "State",
    "SolverStack",
    "StepperOptions",
    "StepFailure",
    "IllPosedProblemError",
    "CoupledStepper",
]

logger = logging.getLogger(__name__)


class _StationaryType:
    """Sentinel selecting the stationary form of the momentum solve."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "STATIONARY"


STATIONARY = _StationaryType()


class StepFailure(RuntimeError):
    """A sub-solve of a time step did not converge.

    The previous state is left untouched; ``stage`` names the failing
    sub-problem and ``report`` carries the last solver report if one
    exists.
    """

    def __init__(self, stage: str, message: str, report: SolveReport | None = None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.report = report


class IllPosedProblemError(RuntimeError):
    """The external field violates the flux compatibility condition of
    the pure-Neumann magnetostatic problem."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on [0, t_end] with n_steps steps."""

    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def tau(self) -> float:
        return self.t_end / self.n_steps

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.tau


@dataclass(frozen=True)
class State:
    """Discrete solution at one time level: density u (P1), velocity v
    (P2 vector), pressure p (P1), magnetic potential phi (P2), field
    strength h (P1 vector)."""

    k: int
    t: float
    u: DiscreteField
    v: DiscreteField
    p: DiscreteField
    phi: DiscreteField
    h: DiscreteField


def _default_mag_newton():
    return NewtonConfig(rel_update_tol=1e-8, max_iters=30)


def _default_mag_linear():
    return LinearSolverConfig(method="gmres", rel_tol=1e-12, abs_tol=1e-14,
                              max_iters=200, restart=50, preconditioner="none")


def _default_ns_newton():
    return NewtonConfig(rel_update_tol=1e-9, max_iters=30)


def _default_ns_linear():
    return LinearSolverConfig(method="gmres", rel_tol=1e-11, abs_tol=1e-14,
                              max_iters=600, restart=150, preconditioner="none")


def _default_transport_newton():
    return NewtonConfig(rel_update_tol=1e-12, max_iters=30)


def _default_transport_linear():
    return LinearSolverConfig(method="gmres", rel_tol=1e-12, abs_tol=1e-14,
                              max_iters=200, restart=50, preconditioner="none")


def _default_projection_linear():
    return LinearSolverConfig(method="cg", rel_tol=1e-12, abs_tol=1e-14,
                              max_iters=200, preconditioner="none")


@dataclass
class SolverStack:
    """Per-subproblem solver settings.

    All Krylov solves receive an explicit preconditioner built by the
    stepper (direct factorization of the current matrix, or the block
    pressure-convection-diffusion preconditioner for the saddle-point
    system), so the ``preconditioner`` names inside the configs are not
    used.
    """

    magnetostatics_newton: NewtonConfig = field(default_factory=_default_mag_newton)
    magnetostatics_linear: LinearSolverConfig = field(default_factory=_default_mag_linear)
    ns_newton: NewtonConfig = field(default_factory=_default_ns_newton)
    ns_linear: LinearSolverConfig = field(default_factory=_default_ns_linear)
    transport_newton: NewtonConfig = field(default_factory=_default_transport_newton)
    transport_linear: LinearSolverConfig = field(default_factory=_default_transport_linear)
    projection_linear: LinearSolverConfig = field(default_factory=_default_projection_linear)


@dataclass
class StepperOptions:
    """Discretization and monitoring settings.

    ``bounds`` are the monitoring limits for the density (values
    outside trigger a warning, never clamping).  ``compat_tol`` bounds
    the net external flux relative to the total absolute flux: a
    divergence-free field integrates to zero up to boundary-quadrature
    error, which is deflated from the data, while a genuinely
    incompatible field (O(1) relative net flux) is rejected.
    """

    quad_order: int = 4
    boundary_quad_order: int = 5
    bounds: tuple = (-0.01, 1.01)
    compat_tol: float = 1e-3
    supg: bool = True
    solvers: SolverStack = field(default_factory=SolverStack)


def _splu_factory(matrix, _x=None):
    return spla.splu(sp.csc_matrix(matrix)).solve


def _mobility(u):
    """Magnetophoretic mobility u(1-u), evaluated with the density
    clipped to its physical range [0, 1].

    Inside the range this is the model coefficient unchanged; outside,
    the drift is switched off so discrete over/undershoots advect
    passively with the flow instead of amplifying (the raw quadratic
    increases the wave speed without bound as u leaves [0, 1])."""
    uc = np.clip(u, 0.0, 1.0)
    return uc * (1.0 - uc)


def _mobility_deriv(u):
    return np.where((u > 0.0) & (u < 1.0), 1.0 - 2.0 * u, 0.0)


def _zero_constraint(bc: DirichletConstraint) -> DirichletConstraint:
    return DirichletConstraint(bc.dofs, np.zeros_like(bc.values))


class CoupledStepper:
    """Advances the coupled system on one mesh.

    Parameters
    ----------
    mesh : SimplicialMesh
    params : NondimParams
    variant : ModelVariant
    velocity_dirichlet : mapping BoundaryTag -> callable(x) -> vector
        Essential velocity data; tags absent from the mapping are left
        natural (do-nothing).
    inflow_density : callable(t, x) -> scalar, optional
        Weakly imposed particle density at the inflow boundary.
    external_flux : callable(x) -> vector, optional
        External magnetic flux density b_e; its normal trace drives the
        magnetostatic problem.  Must satisfy the net-flux compatibility
        condition.
    options : StepperOptions
    """

    def __init__(self, mesh: SimplicialMesh, params: NondimParams,
                 variant: ModelVariant, *, velocity_dirichlet=None,
                 inflow_density=None, external_flux=None,
                 options: StepperOptions | None = None):
        self.mesh = mesh
        self.params = params
        self.variant = variant
        self.options = options or StepperOptions()
        self.inflow_density = inflow_density
        self.external_flux = external_flux

        self.space_u = FESpace(mesh, degree=1)
        self.space_p = FESpace(mesh, degree=1)
        self.space_phi = FESpace(mesh, degree=2)
        self.space_v = FESpace(mesh, degree=2, components=mesh.dim)
        self.space_h = FESpace(mesh, degree=1, components=mesh.dim)

        q = self.options.quad_order
        self._x_q, self._w_q = quad_points(mesh, q)
        self._h_cells = mesh.cell_diameters()

        self._has_inflow = mesh.facets_where(BoundaryTag.INFLOW).size > 0
        self._has_outflow = mesh.facets_where(BoundaryTag.OUTFLOW).size > 0

        # static operators
        self._mass_u = assemble_matrix(self.space_u, self.space_u, mass_kernel(), q)
        self._stiff_u = assemble_matrix(self.space_u, self.space_u, stiffness_kernel(), q)
        self._mass_h = assemble_matrix(self.space_h, self.space_h, mass_kernel(), q)
        self._lu_mass_h = spla.splu(self._mass_h.tocsc())
        self._mass_p = assemble_matrix(self.space_p, self.space_p, mass_kernel(), q)
        self._lu_mass_p = spla.splu(self._mass_p.tocsc())
        self._stiff_p = assemble_matrix(self.space_p, self.space_p, stiffness_kernel(), q)

        def div_kernel(ctx):
            div = np.einsum("cqjdd->cqj", ctx.trial_grads)
            return np.einsum("cq,cqi,cqj->cij", ctx.w, ctx.test_vals, div)

        self._div_vp = assemble_matrix(self.space_p, self.space_v, div_kernel, q)
        self._grad_pv = (-self._div_vp.T).tocsr()

        # mean-value functional of the potential space (zero-mean gauge)
        self._mean_phi = assemble_vector(
            self.space_phi, lambda ctx: np.einsum("cq,cqi->ci", ctx.w, ctx.test_vals), q)

        self._mag_rhs = self._assemble_external_rhs()

        bc_map = velocity_dirichlet or {}
        constraints = [self.space_v.dirichlet(tag, fn) for tag, fn in bc_map.items()
                       if mesh.facets_where(tag).size > 0]
        if constraints:
            self._bc_v = merge_constraints(*constraints)
        else:
            self._bc_v = DirichletConstraint(np.empty(0, dtype=int), np.empty(0))
        ns_dofs = [self._bc_v.dofs]
        ns_vals = [self._bc_v.values]
        if not self._has_outflow:
            # enclosed flow: the pressure is only defined up to a
            # constant, fix one dof
            ns_dofs.append(np.array([self.space_v.n_dofs]))
            ns_vals.append(np.array([0.0]))
        self._bc_ns = DirichletConstraint(np.concatenate(ns_dofs),
                                          np.concatenate(ns_vals))
        self._bc_ns0 = _zero_constraint(self._bc_ns)

        self._cached_linear_phi = None
        self._cached_stationary_vp = None

    # ------------------------------------------------------------ helpers

    def _assemble_external_rhs(self):
        """Neumann data -int (b_e . n) psi over the whole boundary.

        The net flux of the data is checked against the compatibility
        tolerance (gross violations mean the field is not divergence
        free) and the small quadrature-level remainder is deflated so
        the discrete pure-Neumann problem is exactly compatible.
        """
        n_phi = self.space_phi.n_dofs
        if self.external_flux is None:
            return np.zeros(n_phi)
        order = self.options.boundary_quad_order
        tags = (BoundaryTag.INFLOW, BoundaryTag.OUTFLOW, BoundaryTag.WALL)
        tags = tuple(t for t in tags if self.mesh.facets_where(t).size > 0)
        flux = {}

        def kernel(ctx):
            be = np.asarray(self.external_flux(ctx.x), dtype=float)
            ben = np.einsum("fqd,fd->fq", be, ctx.normals)
            flux["net"] = float(np.sum(ctx.w * ben))
            flux["abs"] = float(np.sum(ctx.w * np.abs(ben)))
            return -np.einsum("fq,fq,fqi->fi", ctx.w, ben, ctx.test_vals)

        rhs = assemble_boundary_vector(self.space_phi, kernel, tags, order)
        tol = self.options.compat_tol * max(1.0, flux["abs"])
        if abs(flux["net"]) > tol:
            raise IllPosedProblemError(
                f"net external flux {flux['net']:.3e} exceeds compatibility "
                f"tolerance {tol:.3e}; the pure-Neumann magnetostatic problem "
                "is ill-posed for this field")
        bnd_mass = assemble_boundary_vector(
            self.space_phi,
            lambda ctx: np.einsum("fq,fqi->fi", ctx.w, ctx.test_vals),
            tags, order)
        rhs += (flux["net"] / bnd_mass.sum()) * bnd_mass
        return rhs

    def _field(self, space, coeffs):
        return DiscreteField(space, np.asarray(coeffs, dtype=float))

    # ----------------------------------------------------- magnetostatics

    def _mag_coefficient_arrays(self, z, u_q):
        phi = self._field(self.space_phi, z[:-1])
        g_q = grad_at_quad(phi, self.options.quad_order)
        s_q = np.linalg.norm(g_q, axis=-1)
        nu_q = con.magnetic_coefficient(u_q, s_q, self.params)
        return g_q, s_q, nu_q

    def magnetostatics_residual(self, z, u_prev: DiscreteField):
        """Residual of the bordered (zero-mean) nonlinear potential
        system; unknown layout [phi dofs, multiplier]."""
        u_q = self._clamped_density(u_prev)
        g_q, _, nu_q = self._mag_coefficient_arrays(z, u_q)

        def kernel(ctx):
            return np.einsum("cq,cq,cqd,cqid->ci", ctx.w, nu_q, g_q,
                             ctx.test_grads)

        r_phi = assemble_vector(self.space_phi, kernel, self.options.quad_order)
        r_phi += z[-1] * self._mean_phi - self._mag_rhs
        r_mean = self._mean_phi @ z[:-1]
        return np.concatenate([r_phi, [r_mean]])

    def magnetostatics_jacobian(self, z, u_prev: DiscreteField):
        u_q = self._clamped_density(u_prev)
        g_q, s_q, nu_q = self._mag_coefficient_arrays(z, u_q)
        p = self.params
        dnu_over_s = (p.m_bar * u_q * p.xi_bar ** 3
                      * con.langevin_hat_deriv_over_alpha(p.xi_bar * s_q))
        dim = self.mesh.dim
        tensor = (nu_q[..., None, None] * np.eye(dim)
                  + dnu_over_s[..., None, None]
                  * np.einsum("cqa,cqb->cqab", g_q, g_q))

        def kernel(ctx):
            return np.einsum("cq,cqab,cqjb,cqia->cij", ctx.w, tensor,
                             ctx.trial_grads, ctx.test_grads)

        stiff = assemble_matrix(self.space_phi, self.space_phi, kernel,
                                self.options.quad_order)
        m_col = sp.csr_matrix(self._mean_phi[:, None])
        return sp.bmat([[stiff, m_col], [m_col.T, None]], format="csr")

    def _clamped_density(self, u_prev: DiscreteField):
        u_q = eval_at_quad(u_prev, self.options.quad_order)
        return np.clip(u_q, 0.0, 1.0)

    def solve_magnetostatics(self, u_prev: DiscreteField,
                             phi0: DiscreteField | None = None):
        """Solve the nonlinear Neumann problem for the potential.

        Returns ``(phi, SolveReport)``; ``iterations`` counts Newton
        steps (1 for the linear constant-coefficient variant).
        """
        stack = self.options.solvers
        n_phi = self.space_phi.n_dofs
        if not self.variant.magnet_response:
            stiff = assemble_matrix(self.space_phi, self.space_phi,
                                    stiffness_kernel(), self.options.quad_order)
            m_col = sp.csr_matrix(self._mean_phi[:, None])
            a = sp.bmat([[stiff, m_col], [m_col.T, None]], format="csr")
            rhs = np.concatenate([self._mag_rhs, [0.0]])
            z, rep = solve_linear(a, rhs, stack.magnetostatics_linear,
                                  precond=_splu_factory(a))
            if not rep.converged:
                raise StepFailure("magnetostatics",
                                  "linear potential solve stalled", rep)
            return self._field(self.space_phi, z[:n_phi]), \
                SolveReport(1, rep.final_residual, True)
        z0 = np.zeros(n_phi + 1)
        if phi0 is not None:
            z0[:n_phi] = phi0.coeffs
        try:
            z, rep = newton_solve(
                lambda zz: self.magnetostatics_residual(zz, u_prev),
                lambda zz: self.magnetostatics_jacobian(zz, u_prev),
                z0, stack.magnetostatics_newton, stack.magnetostatics_linear,
                precond_factory=_splu_factory)
        except LinearSolverError as exc:
            raise StepFailure("magnetostatics", str(exc), exc.report) from exc
        if not rep.converged:
            raise StepFailure(
                "magnetostatics",
                f"Newton stalled after {rep.iterations} iterations "
                f"(residual {rep.final_residual:.3e})", rep)
        return self._field(self.space_phi, z[:n_phi]), rep

    def project_field_strength(self, phi: DiscreteField):
        """L2-project -grad(phi) onto the P1 vector space."""
        q = self.options.quad_order
        g_q = grad_at_quad(phi, q)

        def kernel(ctx):
            return -np.einsum("cq,cqd,cqid->ci", ctx.w, g_q, ctx.test_vals)

        rhs = assemble_vector(self.space_h, kernel, q)
        coeffs, rep = solve_cg(self._mass_h, rhs,
                               self.options.solvers.projection_linear,
                               precond=self._lu_mass_h.solve)
        if not rep.converged:
            raise StepFailure("field_projection", "mass solve stalled", rep)
        return self._field(self.space_h, coeffs), rep

    # ------------------------------------------------------ navier-stokes

    def _ns_coefficients(self, u_prev: DiscreteField, h: DiscreteField):
        """Quadrature-point data entering one momentum solve."""
        q = self.options.quad_order
        p = self.params
        u_q = eval_at_quad(u_prev, q)
        gu_q = grad_at_quad(u_prev, q)
        h_q = eval_at_quad(h, q)
        gh_q = grad_at_quad(h, q)
        if self.variant.fluid_response:
            # coefficients see the density clipped to [0, 1]: transport
            # over/undershoots must not make the mixture density or the
            # mobility unphysical (same treatment as the magnetostatic
            # coefficient)
            uc_q = np.clip(u_q, 0.0, 1.0)
            rho_q = con.mixture_density(uc_q, p)
            eta_q = con.mixture_viscosity(uc_q)
            vhat_q = con.flux_vprel_hat(uc_q, gu_q, h_q, gh_q, p)
            conv_off = (p.rho_ratio - 1.0) * vhat_q
            force_q = con.body_force(uc_q, h_q, gh_q, p)
        else:
            rho_q = np.ones_like(u_q)
            eta_q = np.ones_like(u_q)
            conv_off = np.zeros_like(h_q)
            force_q = np.zeros_like(h_q)
        if self._has_outflow:
            u_f = eval_on_facets(u_prev, BoundaryTag.OUTFLOW,
                                 self.options.boundary_quad_order)
            eta_f = (con.mixture_viscosity(np.clip(u_f, 0.0, 1.0))
                     if self.variant.fluid_response else np.ones_like(u_f))
        else:
            eta_f = None
        return {"rho": rho_q, "eta": eta_q, "conv_off": conv_off,
                "force": force_q, "eta_out": eta_f}

    def _ns_static_blocks(self, coef):
        """Matrices independent of the momentum iterate."""
        q = self.options.quad_order
        p = self.params

        def sym_visc_kernel(ctx):
            sym_t = ctx.trial_grads + np.swapaxes(ctx.trial_grads, -1, -2)
            sym_s = ctx.test_grads + np.swapaxes(ctx.test_grads, -1, -2)
            return (0.5 / p.re) * np.einsum("cq,cq,cqjab,cqiab->cij", ctx.w,
                                            coef["eta"], sym_t, sym_s)

        visc = assemble_matrix(self.space_v, self.space_v, sym_visc_kernel, q)
        if self._has_outflow:
            eta_f = coef["eta_out"]

            def outflow_kernel(ctx):
                return -(1.0 / p.re) * np.einsum(
                    "fq,fq,fa,fqjab,fqib->fij", ctx.w, eta_f, ctx.normals,
                    ctx.trial_grads, ctx.test_vals)

            visc = visc + assemble_boundary_matrix(
                self.space_v, self.space_v, outflow_kernel, BoundaryTag.OUTFLOW,
                self.options.boundary_quad_order)

        def rho_mass_kernel(ctx):
            return np.einsum("cq,cq,cqja,cqia->cij", ctx.w, coef["rho"],
                             ctx.trial_vals, ctx.test_vals)

        mass_rho = assemble_matrix(self.space_v, self.space_v, rho_mass_kernel, q)

        def force_kernel(ctx):
            return np.einsum("cq,cqa,cqia->ci", ctx.w, coef["force"],
                             ctx.test_vals)

        force = assemble_vector(self.space_v, force_kernel, q)
        return visc.tocsr(), mass_rho.tocsr(), force

    def _ns_convection(self, v_field, coef, jacobian_part=False):
        """Convection matrix N(c) with c = rho*v + slip offset, and
        optionally the linearization (rho dv . grad) v."""
        q = self.options.quad_order
        v_q = eval_at_quad(v_field, q)
        c_q = coef["rho"][..., None] * v_q + coef["conv_off"]

        def conv_kernel(ctx):
            return np.einsum("cq,cqa,cqjba,cqib->cij", ctx.w, c_q,
                             ctx.trial_grads, ctx.test_vals)

        n_mat = assemble_matrix(self.space_v, self.space_v, conv_kernel, q)
        if not jacobian_part:
            return n_mat
        gv_q = grad_at_quad(v_field, q)

        def lin_kernel(ctx):
            return np.einsum("cq,cq,cqja,cqba,cqib->cij", ctx.w, coef["rho"],
                             ctx.trial_vals, gv_q, ctx.test_vals)

        return n_mat, assemble_matrix(self.space_v, self.space_v, lin_kernel, q), c_q

    def _ns_system_parts(self, z, coef, visc, mass_rho, force, v_prev, tau):
        nv = self.space_v.n_dofs
        v_field = self._field(self.space_v, z[:nv])
        n_mat, n_lin, c_q = self._ns_convection(v_field, coef, jacobian_part=True)
        transient = tau is not STATIONARY
        a_vv = visc + n_mat
        if transient:
            a_vv = a_vv + (1.0 / tau) * mass_rho
        r_v = a_vv @ z[:nv] + self._grad_pv @ z[nv:] - force
        if transient:
            r_v -= (1.0 / tau) * (mass_rho @ v_prev.coeffs)
        r_p = self._div_vp @ z[:nv]
        residual = np.concatenate([r_v, r_p])
        jac = sp.bmat([[a_vv + n_lin, self._grad_pv],
                       [self._div_vp, None]], format="csr")
        return residual, jac, c_q

    def ns_residual(self, z, u_prev, v_prev, h, tau):
        """Momentum/continuity residual at unknown [v dofs, p dofs],
        with Dirichlet rows replaced by the constraint residual."""
        coef = self._ns_coefficients(u_prev, h)
        visc, mass_rho, force = self._ns_static_blocks(coef)
        residual, _, _ = self._ns_system_parts(z, coef, visc, mass_rho, force,
                                               v_prev, tau)
        bc = self._bc_ns
        residual[bc.dofs] = z[bc.dofs] - bc.values
        return residual

    def ns_jacobian(self, z, u_prev, v_prev, h, tau):
        coef = self._ns_coefficients(u_prev, h)
        visc, mass_rho, force = self._ns_static_blocks(coef)
        _, jac, _ = self._ns_system_parts(z, coef, visc, mass_rho, force,
                                          v_prev, tau)
        jac, _ = apply_dirichlet(jac, np.zeros(jac.shape[0]), self._bc_ns0)
        return jac

    def _pressure_convection(self, c_q, tau):
        """Pressure-space convection-diffusion operator for the block
        preconditioner."""
        q = self.options.quad_order

        def kernel(ctx):
            return np.einsum("cq,cqa,cqja,cqi->cij", ctx.w, c_q,
                             ctx.trial_grads, ctx.test_vals)

        conv = assemble_matrix(self.space_p, self.space_p, kernel, q)
        fp = (1.0 / self.params.re) * self._stiff_p + conv
        if tau is not STATIONARY:
            fp = fp + (1.0 / tau) * self._mass_p
        return fp

    def solve_navier_stokes_step(self, u_prev: DiscreteField,
                                 v_prev: DiscreteField, h: DiscreteField,
                                 tau, p_prev: DiscreteField | None = None,
                                 stokes_guess: bool = False):
        """One semi-implicit momentum solve (or the stationary problem
        when ``tau is STATIONARY``).

        Returns ``((v, p), SolveReport)``.
        """
        stack = self.options.solvers
        nv = self.space_v.n_dofs
        n_all = nv + self.space_p.n_dofs
        coef = self._ns_coefficients(u_prev, h)
        visc, mass_rho, force = self._ns_static_blocks(coef)
        bc = self._bc_ns

        z0 = np.zeros(n_all)
        z0[:nv] = v_prev.coeffs
        if p_prev is not None:
            z0[nv:] = p_prev.coeffs
        z0[bc.dofs] = bc.values
        if stokes_guess:
            a_vv = visc
            if tau is not STATIONARY:
                a_vv = a_vv + (1.0 / tau) * mass_rho
            a = sp.bmat([[a_vv, self._grad_pv], [self._div_vp, None]],
                        format="csr")
            b = np.concatenate([force, np.zeros(self.space_p.n_dofs)])
            if tau is not STATIONARY:
                b[:nv] += (1.0 / tau) * (mass_rho @ v_prev.coeffs)
            a, b = apply_dirichlet(a, b, bc)
            z0 = spla.splu(a.tocsc()).solve(b)

        def residual(z):
            r, _, _ = self._ns_system_parts(z, coef, visc, mass_rho, force,
                                            v_prev, tau)
            r[bc.dofs] = z[bc.dofs] - bc.values
            return r

        def jacobian(z):
            _, jac, c_q = self._ns_system_parts(z, coef, visc, mass_rho,
                                                force, v_prev, tau)
            jac, _ = apply_dirichlet(jac, np.zeros(n_all), self._bc_ns0)
            self._last_cq = c_q
            return jac

        def pcd_factory(jac, _z):
            ops = PCDOperators(
                f_block=jac[:nv, :nv].tocsr(),
                grad_block=jac[:nv, nv:].tocsr(),
                mass_p=self._mass_p, stiff_p=self._stiff_p,
                conv_diff_p=self._pressure_convection(self._last_cq, tau))
            return make_preconditioner("block_pcd", ops)

        try:
            z, rep = newton_solve(residual, jacobian, z0, stack.ns_newton,
                                  stack.ns_linear, precond_factory=pcd_factory)
        except LinearSolverError as exc:
            raise StepFailure("navier_stokes", str(exc), exc.report) from exc
        if not rep.converged:
            raise StepFailure(
                "navier_stokes",
                f"Newton stalled after {rep.iterations} iterations "
                f"(residual {rep.final_residual:.3e})", rep)
        return (self._field(self.space_v, z[:nv]),
                self._field(self.space_p, z[nv:])), rep

    # ---------------------------------------------------------- transport

    def _transport_context(self, v: DiscreteField, h: DiscreteField):
        """Step-constant quadrature data for the density solve."""
        q = self.options.quad_order
        p = self.params
        v_q = eval_at_quad(v, q)
        h_q = eval_at_quad(h, q)
        gh_q = grad_at_quad(h, q)
        drift_q = con.streamline_velocity(np.zeros_like(v_q), h_q, gh_q, p)
        ctx = {"v": v_q, "drift": drift_q}
        if self.options.supg:
            v1 = eval_at_quad(v, 1)
            h1 = eval_at_quad(h, 1)
            gh1 = grad_at_quad(h, 1)
            vsd_c = con.streamline_velocity(v1, h1, gh1, p)[:, 0, :]
            speed = np.linalg.norm(vsd_c, axis=-1)
            h_k = self._h_cells
            delta = h_k / (4.0 / (h_k * p.pe) + 2.0 * speed)
            vsd_q = v_q + drift_q

            def supg_kernel(kctx):
                a_t = np.einsum("cqa,cqja->cqj", vsd_q, kctx.trial_grads)
                a_s = np.einsum("cqa,cqia->cqi", vsd_q, kctx.test_grads)
                return np.einsum("c,cq,cqj,cqi->cij", delta, kctx.w, a_t, a_s)

            ctx["supg"] = assemble_matrix(self.space_u, self.space_u,
                                          supg_kernel, q)
        else:
            ctx["supg"] = None
        border = self.options.boundary_quad_order
        if self._has_outflow:
            v_f = eval_on_facets(v, BoundaryTag.OUTFLOW, border)
            h_f = eval_on_facets(h, BoundaryTag.OUTFLOW, border)
            gh_f = grad_on_facets(h, BoundaryTag.OUTFLOW, border)
            ctx["v_out"] = v_f
            ctx["drift_out"] = con.streamline_velocity(np.zeros_like(v_f),
                                                       h_f, gh_f, p)
        if self._has_inflow and self.inflow_density is not None:
            ctx["v_in"] = eval_on_facets(v, BoundaryTag.INFLOW, border)
        return ctx

    def transport_residual(self, z, u_prev, v, h, tau, t, ctx=None):
        """Residual of the implicit density step at unknown u dofs."""
        ctx = ctx or self._transport_context(v, h)
        q = self.options.quad_order
        u_field = self._field(self.space_u, z)
        u_q = eval_at_quad(u_field, q)
        flux_q = (u_q[..., None] * ctx["v"]
                  + _mobility(u_q)[..., None] * ctx["drift"])

        def conv_kernel(kctx):
            return np.einsum("cq,cqa,cqia->ci", kctx.w, flux_q, kctx.test_grads)

        r = (1.0 / tau) * (self._mass_u @ (z - u_prev.coeffs))
        r += (1.0 / self.params.pe) * (self._stiff_u @ z)
        r -= assemble_vector(self.space_u, conv_kernel, q)
        if ctx["supg"] is not None:
            r += ctx["supg"] @ z
        border = self.options.boundary_quad_order
        if self._has_outflow:
            u_f = eval_on_facets(u_field, BoundaryTag.OUTFLOW, border)
            flux_f = (u_f[..., None] * ctx["v_out"]
                      + _mobility(u_f)[..., None] * ctx["drift_out"])

            def out_kernel(kctx):
                flux_n = np.einsum("fqa,fa->fq", flux_f, kctx.normals)
                return np.einsum("fq,fq,fqi->fi", kctx.w, flux_n, kctx.test_vals)

            r += assemble_boundary_vector(self.space_u, out_kernel,
                                          BoundaryTag.OUTFLOW, border)
        if self._has_inflow and self.inflow_density is not None:
            v_in = ctx["v_in"]

            def in_kernel(kctx):
                u_in = np.asarray(self.inflow_density(t, kctx.x), dtype=float)
                v_n = np.einsum("fqa,fa->fq", v_in, kctx.normals)
                return np.einsum("fq,fq,fq,fqi->fi", kctx.w, u_in, v_n,
                                 kctx.test_vals)

            r += assemble_boundary_vector(self.space_u, in_kernel,
                                          BoundaryTag.INFLOW, border)
        return r

    def transport_jacobian(self, z, u_prev, v, h, tau, t, ctx=None):
        ctx = ctx or self._transport_context(v, h)
        q = self.options.quad_order
        u_field = self._field(self.space_u, z)
        u_q = eval_at_quad(u_field, q)
        dflux_q = ctx["v"] + _mobility_deriv(u_q)[..., None] * ctx["drift"]

        def conv_kernel(kctx):
            return np.einsum("cq,cqa,cqia,cqj->cij", kctx.w, dflux_q,
                             kctx.test_grads, kctx.trial_vals)

        jac = (1.0 / tau) * self._mass_u + (1.0 / self.params.pe) * self._stiff_u
        jac = jac - assemble_matrix(self.space_u, self.space_u, conv_kernel, q)
        if ctx["supg"] is not None:
            jac = jac + ctx["supg"]
        if self._has_outflow:
            border = self.options.boundary_quad_order
            u_f = eval_on_facets(u_field, BoundaryTag.OUTFLOW, border)
            dflux_f = (ctx["v_out"]
                       + _mobility_deriv(u_f)[..., None] * ctx["drift_out"])

            def out_kernel(kctx):
                dfn = np.einsum("fqa,fa->fq", dflux_f, kctx.normals)
                return np.einsum("fq,fq,fqi,fqj->fij", kctx.w, dfn,
                                 kctx.test_vals, kctx.trial_vals)

            jac = jac + assemble_boundary_matrix(self.space_u, self.space_u,
                                                 out_kernel, BoundaryTag.OUTFLOW,
                                                 border)
        return jac.tocsr()

    def solve_transport_step(self, u_prev: DiscreteField, v: DiscreteField,
                             h: DiscreteField, tau: float, t: float):
        """Implicit density transport; returns ``(u, SolveReport)``."""
        stack = self.options.solvers
        ctx = self._transport_context(v, h)
        try:
            z, rep = newton_solve(
                lambda zz: self.transport_residual(zz, u_prev, v, h, tau, t, ctx),
                lambda zz: self.transport_jacobian(zz, u_prev, v, h, tau, t, ctx),
                u_prev.coeffs.copy(), stack.transport_newton,
                stack.transport_linear, precond_factory=_splu_factory)
        except LinearSolverError as exc:
            raise StepFailure("transport", str(exc), exc.report) from exc
        if not rep.converged:
            raise StepFailure(
                "transport",
                f"Newton stalled after {rep.iterations} iterations "
                f"(residual {rep.final_residual:.3e})", rep)
        u = self._field(self.space_u, z)
        lo, hi = self.options.bounds
        u_min, u_max = float(z.min()), float(z.max())
        if u_min < lo or u_max > hi:
            logger.warning("density out of bounds at t=%.6g: min=%.3e max=%.3e",
                           t, u_min, u_max)
        return u, rep

    # ------------------------------------------------------------- driving

    def continuity_residual(self, v: DiscreteField) -> float:
        """Discrete divergence of v in the L2 sense: the norm of the
        pressure-space Riesz representer of q -> int q div(v)."""
        dv = self._div_vp @ v.coeffs
        return float(np.sqrt(dv @ self._lu_mass_p.solve(dv)))

    def initialize(self, initial_density=None) -> State:
        """Build the coupled initial state: interpolated density,
        potential/field from it, and the stationary momentum solution."""
        if initial_density is None:
            u0 = self._field(self.space_u, np.zeros(self.space_u.n_dofs))
        else:
            u0 = interpolate(initial_density, self.space_u)
        phi0, _ = self.solve_magnetostatics(u0)
        h0, _ = self.project_field_strength(phi0)
        v_null = self._field(self.space_v, np.zeros(self.space_v.n_dofs))
        (v0, p0), _ = self.solve_navier_stokes_step(
            u0, v_null, h0, STATIONARY, stokes_guess=True)
        if not self.variant.magnet_response:
            self._cached_linear_phi = (phi0, h0)
        if not self.variant.fluid_response:
            self._cached_stationary_vp = (v0, p0)
        return State(0, 0.0, u0, v0, p0, phi0, h0)

    def advance(self, state: State, tau: float):
        """One full splitting step; returns ``(state, DiagnosticsRecord)``.

        Any sub-solve failure raises :class:`StepFailure` and leaves the
        previous state valid.
        """
        t_next = (state.k + 1) * tau
        if not self.variant.magnet_response and self._cached_linear_phi:
            phi, h = self._cached_linear_phi
            iters_mag = 0
        else:
            phi, rep_mag = self.solve_magnetostatics(state.u, phi0=state.phi)
            h, _ = self.project_field_strength(phi)
            iters_mag = rep_mag.iterations
        if not self.variant.fluid_response and self._cached_stationary_vp:
            v, p = self._cached_stationary_vp
            iters_ns = 0
        else:
            (v, p), rep_ns = self.solve_navier_stokes_step(
                state.u, state.v, h, tau, p_prev=state.p)
            iters_ns = rep_ns.iterations
        u, rep_t = self.solve_transport_step(state.u, v, h, tau, t_next)
        new_state = State(state.k + 1, t_next, u, v, p, phi, h)
        record = self.diagnostics(new_state, iters_ns, rep_t.iterations,
                                  iters_mag)
        return new_state, record

    def diagnostics(self, state: State, iters_ns: int = 0, iters_t: int = 0,
                    iters_mag: int = 0) -> DiagnosticsRecord:
        """Scalar monitors of a state; iteration counts default to zero
        for states not produced by :meth:`advance`."""
        q = self.options.quad_order
        u_q = eval_at_quad(state.u, q)
        gu_q = grad_at_quad(state.u, q)
        v_q = eval_at_quad(state.v, q)
        gv_q = grad_at_quad(state.v, q)
        h_q = eval_at_quad(state.h, q)
        gh_q = grad_at_quad(state.h, q)
        flux_q = con.flux_vprel_hat(u_q, gu_q, h_q, gh_q, self.params)
        e_kin, e_mix, e_mag, d_kin, d_drag = con.energy_diagnostics(
            self._w_q, u_q, v_q, gv_q, h_q, flux_q, self.params)
        return DiagnosticsRecord(
            t=state.t,
            r1=center_of_mass_x1(state.u, q),
            total_mass=mass_integral(state.u, q),
            u_min=float(state.u.coeffs.min()),
            u_max=float(state.u.coeffs.max()),
            div_norm=self.continuity_residual(state.v),
            e_kin=e_kin, e_mix=e_mix, e_mag=e_mag,
            d_kin=d_kin, d_drag=d_drag,
            newton_iters_ns=iters_ns,
            newton_iters_transport=iters_t,
            newton_iters_mag=iters_mag)
