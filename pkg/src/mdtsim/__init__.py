"""Finite element simulator for magnetically targeted particle transport.

Solves a coupled system of nonlinear magnetostatics, incompressible
Navier-Stokes flow with concentration-dependent density/viscosity, and
stabilized convection-diffusion transport of a magnetic particle phase,
on simplicial meshes in 2D and 3D.
"""

from .config import ConfigError, build_config, parse_config, serialize_config
from .constitutive import ModelVariant, NondimParams
from .diagnostics import DiagnosticsRecord, center_of_mass_x1, mass_integral
from .io import (RunManifest, read_vtk, write_diagnostics_csv,
                 write_run_manifest, write_run_outputs, write_vtk_snapshot)
from .mesh import (BoundaryTag, SimplicialMesh, build_channel_2d,
                   build_pipe_3d, refine_uniform)
from .scenario import (RunResult, ScenarioConfig, SweepResult, default_params,
                       dipole_field, inflow_pulse, inflow_velocity,
                       retained_mass, run_magnet_distance_sweep,
                       run_simulation, scenario_mesh)
from .stepper import (CoupledStepper, IllPosedProblemError, State,
                      StepFailure, StepperOptions, TimeGrid)

__version__ = "0.1.0"

__all__ = [
    "BoundaryTag",
    "ConfigError",
    "CoupledStepper",
    "DiagnosticsRecord",
    "IllPosedProblemError",
    "ModelVariant",
    "NondimParams",
    "RunManifest",
    "RunResult",
    "ScenarioConfig",
    "SimplicialMesh",
    "State",
    "StepFailure",
    "StepperOptions",
    "SweepResult",
    "TimeGrid",
    "build_channel_2d",
    "build_config",
    "build_pipe_3d",
    "center_of_mass_x1",
    "default_params",
    "dipole_field",
    "inflow_pulse",
    "inflow_velocity",
    "mass_integral",
    "parse_config",
    "read_vtk",
    "refine_uniform",
    "retained_mass",
    "run_magnet_distance_sweep",
    "run_simulation",
    "scenario_mesh",
    "serialize_config",
    "write_diagnostics_csv",
    "write_run_manifest",
    "write_run_outputs",
    "write_vtk_snapshot",
    "__version__",
]
