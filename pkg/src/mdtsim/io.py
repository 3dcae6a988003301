"""Run outputs: diagnostics CSV, VTK legacy snapshots, and the run manifest.

All writers are deterministic: identical inputs produce byte-identical
files.  Floats are rendered with 17 significant digits, which is lossless
for IEEE doubles.
"""

from __future__ import annotations

import dataclasses
import importlib.metadata
import json
import os
import tempfile

import numpy as np

from .fem import DiscreteField
from .mesh import SimplicialMesh, refine_uniform

__all__ = [
    "CSV_HEADER",
    "RunManifest",
    "code_version",
    "load_run_manifest",
    "read_vtk",
    "write_diagnostics_csv",
    "write_run_manifest",
    "write_run_outputs",
    "write_sweep_summary",
    "write_vtk_snapshot",
]

CSV_HEADER = ("t,R1,total_mass,u_min,u_max,div_norm,E_kin,E_mix,E_mag,"
              "D_kin,D_drag,newton_iters_ns,newton_iters_transport,"
              "newton_iters_mag")

_INT_FIELDS = {"newton_iters_ns", "newton_iters_transport", "newton_iters_mag"}


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_diagnostics_csv(records, path) -> None:
    """Write the diagnostics time series, one row per recorded step."""
    lines = [CSV_HEADER]
    for rec in records:
        lines.append(",".join(_fmt(v) for v in rec.as_tuple()))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------------ VTK snapshots

def output_mesh(mesh: SimplicialMesh) -> SimplicialMesh:
    """Once-refined copy of the simulation mesh used for snapshots.

    Its vertices are the simulation mesh's vertices followed by the edge
    midpoints in mesh edge order, which is exactly the quadratic scalar
    dof layout: quadratic fields map to point data losslessly.
    """
    return refine_uniform(mesh)


def _point_values(field: DiscreteField, mesh: SimplicialMesh) -> np.ndarray:
    """Field values at the output-mesh points, (n_points, components).

    Quadratic coefficients are point values already; linear fields are
    completed with edge-midpoint averages (exact for piecewise linears).
    """
    comp = field.component_coeffs()  # (C, n_scalar)
    if field.space.degree == 1:
        mid = comp[:, mesh.edges].mean(axis=2)
        comp = np.hstack([comp, mid])
    return comp.T


def _pad3(values: np.ndarray) -> np.ndarray:
    if values.shape[1] == 3:
        return values
    out = np.zeros((len(values), 3))
    out[:, : values.shape[1]] = values
    return out


def write_vtk_snapshot(state, path, out_mesh: SimplicialMesh | None = None) -> None:
    """Write one state as a legacy-ASCII VTK unstructured grid.

    Point data arrays are named ``u``, ``v``, ``p``, ``phi``, ``h``.  The
    grid is the once-refined output mesh, so both linear and quadratic
    fields are represented exactly at the points.  Pass ``out_mesh`` to
    reuse a precomputed :func:`output_mesh`.
    """
    mesh = state.u.space.mesh
    if out_mesh is None:
        out_mesh = output_mesh(mesh)
    points = _pad3(out_mesh.vertices)
    cells = out_mesh.cells
    cell_type = 5 if out_mesh.dim == 2 else 10  # VTK triangle / tetra

    lines = ["# vtk DataFile Version 3.0",
             "mdtsim snapshot",
             "ASCII",
             "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(points)} double"]
    for p in points:
        lines.append(" ".join(_fmt(c) for c in p))
    lines.append(f"CELLS {len(cells)} {len(cells) * (cells.shape[1] + 1)}")
    for c in cells:
        lines.append(f"{cells.shape[1]} " + " ".join(str(i) for i in c))
    lines.append(f"CELL_TYPES {len(cells)}")
    lines.extend(str(cell_type) for _ in range(len(cells)))
    lines.append(f"POINT_DATA {len(points)}")

    for name in ("u", "v", "p", "phi", "h"):
        values = _point_values(getattr(state, name), mesh)
        if values.shape[1] == 1:
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(_fmt(v) for v in values[:, 0])
        else:
            lines.append(f"VECTORS {name} double")
            for row in _pad3(values):
                lines.append(" ".join(_fmt(c) for c in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk(path):
    """Parse a legacy-ASCII VTK unstructured grid written by this package.

    Returns ``(points, cells, point_data)`` with ``point_data`` a dict of
    (n_points,) or (n_points, 3) arrays.
    """
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split("\n")
    it = iter(tokens)
    points = cells = None
    n_points = 0
    point_data: dict[str, np.ndarray] = {}
    for line in it:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "POINTS":
            n_points = int(parts[1])
            points = np.array([next(it).split() for _ in range(n_points)],
                              dtype=float)
        elif parts[0] == "CELLS":
            n_cells = int(parts[1])
            rows = [next(it).split() for _ in range(n_cells)]
            cells = np.array(rows, dtype=int)[:, 1:]
        elif parts[0] == "SCALARS":
            next(it)  # LOOKUP_TABLE line
            point_data[parts[1]] = np.array(
                [next(it) for _ in range(n_points)], dtype=float)
        elif parts[0] == "VECTORS":
            point_data[parts[1]] = np.array(
                [next(it).split() for _ in range(n_points)], dtype=float)
    return points, cells, point_data


# ------------------------------------------------------------- run manifest

def code_version() -> str:
    try:
        return importlib.metadata.version("artifact")
    except importlib.metadata.PackageNotFoundError:
        from . import __version__
        return __version__


@dataclasses.dataclass(frozen=True)
class RunManifest:
    """Provenance record of one run: the fully resolved configuration (as
    INI text that reparses to an equal configuration), the code version,
    wall-clock seconds per phase, and the completion status."""

    config_echo: str
    version: str
    wall_times: dict
    status: str


def write_run_manifest(manifest: RunManifest, path) -> None:
    """Write the manifest as JSON, atomically (write-then-rename)."""
    payload = dataclasses.asdict(manifest)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_run_manifest(path) -> RunManifest:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return RunManifest(**payload)


# ----------------------------------------------------------- run output set

def write_run_outputs(result, out_dir, config_echo: str) -> None:
    """Write diagnostics CSV, snapshot files, and the manifest for a run.

    Partial results of a failed run are written the same way; the
    manifest status then names the failing stage.
    """
    os.makedirs(out_dir, exist_ok=True)
    write_diagnostics_csv(result.records,
                          os.path.join(out_dir, "diagnostics.csv"))

    snap_dir = os.path.join(out_dir, "snapshots")
    os.makedirs(snap_dir, exist_ok=True)
    out_mesh = None
    for snap in result.snapshots:
        if out_mesh is None:
            out_mesh = output_mesh(snap.state.u.space.mesh)
        write_vtk_snapshot(
            snap.state,
            os.path.join(snap_dir, f"snapshot_{snap.step:04d}.vtk"),
            out_mesh=out_mesh)

    if result.failure is None:
        status = "completed"
    else:
        status = f"failed:{result.failure.stage}"
    manifest = RunManifest(config_echo=config_echo,
                           version=code_version(),
                           wall_times=dict(result.wall_times),
                           status=status)
    write_run_manifest(manifest, os.path.join(out_dir, "manifest.json"))


def write_sweep_summary(sweep, path) -> None:
    """Summary table of a magnet-distance sweep, one row per distance."""
    lines = ["distance,retained_mass,R1,capture_efficiency,status"]
    for entry in sweep.entries:
        res = entry.result
        status = "completed" if entry.completed else (
            f"failed:{res.failure.stage}")
        lines.append(",".join([
            _fmt(entry.distance),
            _fmt(entry.retained_mass),
            _fmt(entry.r1),
            _fmt(res.capture_efficiency),
            status,
        ]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
