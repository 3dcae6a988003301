"""Shared fixtures: acceptance reporting and a session-scoped run cache."""

import logging

import pytest

from mdtsim.config import serialize_config
from mdtsim.scenario import run_simulation

# (number, title, passed, detail), collected by the acceptance suite and
# printed one line per criterion in the terminal summary.
_ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Recorder for acceptance criteria; call before asserting so the
    summary line is printed even when the criterion fails."""

    def record(number: int, title: str, passed: bool, detail: str):
        _ACCEPTANCE_RESULTS.append((number, title, passed, detail))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE_RESULTS):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(
            f"criterion {number:2d} [{verdict}] {title}: {detail}")


@pytest.fixture(scope="session")
def cached_run():
    """Run simulations once per distinct configuration for the session.

    Several acceptance criteria share runs (the default full-model run
    appears in the time-step study, the variant comparison, and the
    determinism check baseline); caching keeps the suite within the
    stated runtime budgets.
    """
    cache = {}

    def run(config):
        key = serialize_config(config)
        if key not in cache:
            logging.getLogger("tests").info(
                "cache miss: running %s dim=%d refine=%d N=%d",
                config.variant.name, config.dim, config.refine,
                config.n_steps)
            cache[key] = run_simulation(config)
        return cache[key]

    return run
