"""Scalar diagnostics of simulation states.

Integral metrics of the particle density and velocity fields, and the
per-step record that the runner accumulates into the diagnostics time
series.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .fem import DiscreteField, eval_at_quad, grad_at_quad, quad_points

__all__ = [
    "DiagnosticsRecord",
    "mass_integral",
    "first_moment_x1",
    "center_of_mass_x1",
    "divergence_norm",
]

_MASS_FLOOR = 1e-14


@dataclass(frozen=True)
class DiagnosticsRecord:
    """One row of the diagnostics time series.

    ``r1`` is the mass center of the density along the channel axis,
    ``div_norm`` the L2 norm of the velocity divergence, the ``e_*`` /
    ``d_*`` entries the nondimensional energy and dissipation
    functionals, and the ``newton_iters_*`` fields the nonlinear
    iteration counts of the three sub-solves (0 when a cached solution
    was reused).
    """

    t: float
    r1: float
    total_mass: float
    u_min: float
    u_max: float
    div_norm: float
    e_kin: float
    e_mix: float
    e_mag: float
    d_kin: float
    d_drag: float
    newton_iters_ns: int
    newton_iters_transport: int
    newton_iters_mag: int

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))


def mass_integral(u: DiscreteField, order: int = 4) -> float:
    """Integral of a scalar field over the domain."""
    _, w = quad_points(u.space.mesh, order)
    return float(np.sum(w * eval_at_quad(u, order)))


def first_moment_x1(u: DiscreteField, order: int = 4) -> float:
    """Integral of u * x_1 over the domain."""
    x, w = quad_points(u.space.mesh, order)
    return float(np.sum(w * eval_at_quad(u, order) * x[..., 0]))


def center_of_mass_x1(u: DiscreteField, order: int = 4) -> float:
    """Mass center of the density along the first axis.

    Returns 0 when the total mass is below 1e-14 (empty domain).
    """
    mass = mass_integral(u, order)
    if mass < _MASS_FLOOR:
        return 0.0
    return first_moment_x1(u, order) / mass


def divergence_norm(v: DiscreteField, order: int = 4) -> float:
    """L2 norm of the divergence of a vector field."""
    _, w = quad_points(v.space.mesh, order)
    div = np.einsum("cqdd->cq", grad_at_quad(v, order))
    return float(np.sqrt(np.sum(w * div ** 2)))
