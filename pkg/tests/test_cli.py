"""Tests for the command-line driver: exit codes and output layout."""

import pytest

from mdtsim.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main
from mdtsim.io import load_run_manifest
from mdtsim.stepper import CoupledStepper, StepFailure

TINY_INI = """
[mesh]
dim = 2
refine = 0

[time]
T_end = 0.5
N = 5
snapshot_stride = 5

[variant]
variant = reduced
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


class TestConfigErrors:
    def test_missing_config_file(self, tmp_path, capsys):
        missing = tmp_path / "absent.ini"
        assert main(["--config", str(missing)]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert "absent.ini" in err

    def test_unknown_key_in_config(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[mesh]\ncells = 10\n")
        assert main(["--config", str(path)]) == EXIT_CONFIG
        assert "cells" in capsys.readouterr().err

    def test_invalid_flag_value_exits_two(self, capsys):
        # argparse rejects the choice; its SystemExit is converted
        assert main(["--dim", "5"]) == EXIT_CONFIG
        assert main(["--variant", "bogus"]) == EXIT_CONFIG

    def test_indivisible_tau(self, capsys):
        assert main(["--tau", "0.4"]) == EXIT_CONFIG
        assert "divide" in capsys.readouterr().err

    def test_malformed_sweep_distances(self, capsys):
        assert main(["--sweep-distances", "2,apple"]) == EXIT_CONFIG
        assert "sweep-distances" in capsys.readouterr().err


class TestSingleRun:
    def test_completes_and_writes_outputs(self, tiny_ini, tmp_path):
        out = tmp_path / "out"
        code = main(["--config", str(tiny_ini), "--output-dir", str(out)])
        assert code == EXIT_OK
        assert (out / "diagnostics.csv").is_file()
        assert (out / "snapshots" / "snapshot_0000.vtk").is_file()
        assert (out / "snapshots" / "snapshot_0005.vtk").is_file()
        manifest = load_run_manifest(out / "manifest.json")
        assert manifest.status == "completed"
        # the manifest echoes the fully resolved configuration
        assert "refine = 0" in manifest.config_echo
        assert "variant = reduced" in manifest.config_echo

    def test_tau_flag_sets_step_count(self, tiny_ini, tmp_path):
        out = tmp_path / "out"
        code = main(["--config", str(tiny_ini), "--tau", "0.25",
                     "--output-dir", str(out)])
        assert code == EXIT_OK
        lines = (out / "diagnostics.csv").read_text().splitlines()
        assert len(lines) == 1 + 3  # header, t=0, two steps of 0.25

    def test_solver_failure_exits_three_with_partial_outputs(
            self, tiny_ini, tmp_path, monkeypatch, capsys):
        original = CoupledStepper.advance
        calls = {"n": 0}

        def failing_advance(self, state, tau):
            calls["n"] += 1
            if calls["n"] >= 3:
                raise StepFailure("transport", "injected failure")
            return original(self, state, tau)

        monkeypatch.setattr(CoupledStepper, "advance", failing_advance)
        out = tmp_path / "out"
        code = main(["--config", str(tiny_ini), "--output-dir", str(out)])
        assert code == EXIT_SOLVER
        err = capsys.readouterr().err
        assert "transport" in err
        manifest = load_run_manifest(out / "manifest.json")
        assert manifest.status == "failed:transport"
        lines = (out / "diagnostics.csv").read_text().splitlines()
        assert len(lines) == 1 + 3  # header, initial state, two good steps


class TestSweepRun:
    def test_writes_per_distance_outputs_and_summary(self, tiny_ini, tmp_path):
        out = tmp_path / "sweep"
        code = main(["--config", str(tiny_ini),
                     "--sweep-distances", "2,4",
                     "--output-dir", str(out)])
        assert code == EXIT_OK
        assert (out / "sweep_summary.csv").is_file()
        for label in ("distance_2", "distance_4"):
            assert (out / label / "diagnostics.csv").is_file()
            manifest = load_run_manifest(out / label / "manifest.json")
            assert manifest.status == "completed"
        # each sub-run echoes its own magnet position
        echo2 = load_run_manifest(out / "distance_2" / "manifest.json")
        echo4 = load_run_manifest(out / "distance_4" / "manifest.json")
        assert echo2.config_echo != echo4.config_echo
        lines = (out / "sweep_summary.csv").read_text().splitlines()
        assert len(lines) == 3
        assert lines[1].split(",")[0] == "2"

    def test_single_distance_rejected(self, tiny_ini, capsys):
        code = main(["--config", str(tiny_ini), "--sweep-distances", "2"])
        assert code == EXIT_CONFIG
        assert "at least 2" in capsys.readouterr().err
