"""Tests for the coupled semi-implicit stepper."""

import logging

import numpy as np
import pytest

from mdtsim.constitutive import ModelVariant
from mdtsim.fem import DiscreteField
from mdtsim.scenario import ScenarioConfig, build_scenario_stepper, scenario_mesh
from mdtsim.solvers import NewtonConfig
from mdtsim.stepper import (
    STATIONARY,
    CoupledStepper,
    IllPosedProblemError,
    SolverStack,
    State,
    StepFailure,
    StepperOptions,
    TimeGrid,
)


def _tiny_config(variant="full", **kw):
    kw.setdefault("dim", 2)
    kw.setdefault("refine", 0)
    kw.setdefault("t_end", 1.0)
    kw.setdefault("n_steps", 10)
    return ScenarioConfig(variant=ModelVariant.from_name(variant), **kw)


def _tiny_stepper(variant="full", options=None, **kw):
    config = _tiny_config(variant, **kw)
    mesh = scenario_mesh(config.dim, config.refine)
    return build_scenario_stepper(config, mesh, options), config


@pytest.fixture(scope="module")
def full_setup():
    stepper, config = _tiny_stepper("full")
    state0 = stepper.initialize()
    return stepper, config, state0


class TestTimeGrid:
    def test_spacing_and_endpoints(self):
        grid = TimeGrid(t_end=1.5, n_steps=6)
        assert grid.tau == pytest.approx(0.25)
        times = grid.times()
        assert times.shape == (7,)
        assert times[0] == 0.0
        assert times[-1] == pytest.approx(1.5)
        assert np.allclose(np.diff(times), grid.tau)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            TimeGrid(t_end=0.0, n_steps=5)
        with pytest.raises(ValueError):
            TimeGrid(t_end=1.0, n_steps=0)


class TestInitialize:
    def test_density_starts_empty(self, full_setup):
        _, _, state0 = full_setup
        assert state0.k == 0
        assert state0.t == 0.0
        assert np.all(state0.u.coeffs == 0.0)

    def test_field_shapes(self, full_setup):
        stepper, _, state0 = full_setup
        assert state0.u.coeffs.shape == (stepper.space_u.n_dofs,)
        assert state0.v.coeffs.shape == (stepper.space_v.n_dofs,)
        assert state0.p.coeffs.shape == (stepper.space_p.n_dofs,)
        assert state0.phi.coeffs.shape == (stepper.space_phi.n_dofs,)
        assert state0.h.coeffs.shape == (stepper.space_h.n_dofs,)
        # Taylor-Hood pair: quadratic velocity over linear pressure
        assert stepper.space_v.n_dofs > 2 * stepper.space_p.n_dofs

    def test_initial_velocity_weakly_divergence_free(self, full_setup):
        stepper, _, state0 = full_setup
        v_scale = float(np.max(np.abs(state0.v.coeffs)))
        assert v_scale > 0.1  # inflow actually drives a flow
        assert stepper.continuity_residual(state0.v) <= 1e-8 * v_scale

    def test_potential_has_zero_mean(self, full_setup):
        stepper, _, state0 = full_setup
        mean = stepper._mean_phi @ state0.phi.coeffs
        assert abs(mean) <= 1e-9 * np.max(np.abs(state0.phi.coeffs))

    def test_initial_density_callable(self):
        stepper, _ = _tiny_stepper("reduced")
        state = stepper.initialize(initial_density=lambda x: 0.25 + 0.0 * x[..., 0])
        assert np.allclose(state.u.coeffs, 0.25)


class TestAdvance:
    def test_full_step_runs_all_solvers(self, full_setup):
        stepper, config, state0 = full_setup
        state1, rec = stepper.advance(state0, config.tau)
        assert state1.k == 1
        assert state1.t == pytest.approx(config.tau)
        assert rec.t == pytest.approx(config.tau)
        assert rec.newton_iters_ns >= 1
        assert rec.newton_iters_mag >= 1
        # the inflow pulse has not opened yet, so the zero density is an
        # exact solution and transport converges without an update
        assert rec.newton_iters_transport == 0
        assert rec.u_max == 0.0
        values = np.asarray(rec.as_tuple())
        assert np.all(np.isfinite(values))
        # previous state is untouched
        assert state0.k == 0 and np.all(state0.u.coeffs == 0.0)

    def test_reduced_variant_freezes_flow_and_field(self):
        # tau = 0.5 puts the first step inside the inflow pulse window
        stepper, config = _tiny_stepper("reduced", t_end=2.0, n_steps=4)
        state0 = stepper.initialize()
        state1, rec = stepper.advance(state0, config.tau)
        assert rec.newton_iters_ns == 0
        assert rec.newton_iters_mag == 0
        assert rec.newton_iters_transport >= 1
        assert rec.total_mass > 0.0
        assert state1.v.coeffs is state0.v.coeffs
        assert state1.p.coeffs is state0.p.coeffs
        assert state1.phi.coeffs is state0.phi.coeffs
        assert state1.h.coeffs is state0.h.coeffs

    def test_no_fluid_variant_updates_field_only(self):
        stepper, config = _tiny_stepper("no-fluid")
        state0 = stepper.initialize()
        _, rec = stepper.advance(state0, config.tau)
        assert rec.newton_iters_ns == 0
        assert rec.newton_iters_mag >= 1

    def test_no_magnet_variant_updates_flow_only(self):
        stepper, config = _tiny_stepper("no-magnet")
        state0 = stepper.initialize()
        state1, rec = stepper.advance(state0, config.tau)
        assert rec.newton_iters_mag == 0
        assert rec.newton_iters_ns >= 1
        assert state1.phi.coeffs is state0.phi.coeffs


class TestDiagnostics:
    def test_out_of_bounds_density_warns(self, full_setup, caplog):
        stepper, config, state0 = full_setup
        hot = DiscreteField(stepper.space_u,
                            np.full(stepper.space_u.n_dofs, 1.05))
        with caplog.at_level(logging.WARNING, logger="mdtsim.stepper"):
            stepper.solve_transport_step(hot, state0.v, state0.h,
                                         config.tau, config.tau)
        assert "out of bounds" in caplog.text

    def test_in_bounds_density_is_silent(self, full_setup, caplog):
        stepper, _, state0 = full_setup
        with caplog.at_level(logging.WARNING, logger="mdtsim.stepper"):
            rec = stepper.diagnostics(state0)
        assert "out of bounds" not in caplog.text
        assert rec.total_mass == pytest.approx(0.0, abs=1e-14)
        assert rec.e_kin > 0.0  # stationary inflow carries kinetic energy


class TestFailureModes:
    def test_unreachable_newton_tolerance_raises_step_failure(self):
        solvers = SolverStack(
            magnetostatics_newton=NewtonConfig(rel_update_tol=1e-16,
                                               max_iters=1))
        options = StepperOptions(solvers=solvers)
        stepper, _ = _tiny_stepper("full", options=options)
        with pytest.raises(StepFailure) as err:
            stepper.initialize()
        assert err.value.stage == "magnetostatics"
        assert err.value.report is not None
        assert not err.value.report.converged

    def test_non_solenoidal_external_field_rejected(self):
        config = _tiny_config("full")
        mesh = scenario_mesh(config.dim, config.refine)
        with pytest.raises(IllPosedProblemError):
            CoupledStepper(mesh, config.params, config.variant,
                           external_flux=lambda pts: np.asarray(pts))


class TestDeterminism:
    def test_repeated_runs_are_bitwise_identical(self):
        results = []
        for _ in range(2):
            stepper, config = _tiny_stepper("full")
            state = stepper.initialize()
            for _ in range(2):
                state, rec = stepper.advance(state, config.tau)
            results.append((state.u.coeffs.copy(), state.v.coeffs.copy(),
                            np.asarray(rec.as_tuple())))
        assert np.array_equal(results[0][0], results[1][0])
        assert np.array_equal(results[0][1], results[1][1])
        assert np.array_equal(results[0][2], results[1][2])


class TestStationarySentinel:
    def test_singleton_and_repr(self):
        assert repr(STATIONARY) == "STATIONARY"
        assert type(STATIONARY)() is STATIONARY


class TestPipeSmoke:
    def test_full_model_one_step_in_3d(self):
        stepper, config = _tiny_stepper("full", dim=3, refine=0)
        state0 = stepper.initialize()
        assert stepper.mesh.dim == 3
        assert stepper.continuity_residual(state0.v) <= 1e-6
        state1, rec = stepper.advance(state0, config.tau)
        assert state1.k == 1
        assert np.all(np.isfinite(np.asarray(rec.as_tuple())))
        assert rec.newton_iters_ns >= 1
        assert rec.newton_iters_mag >= 1
