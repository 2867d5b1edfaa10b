from __future__ import annotations

import pytest
from hypothesis import settings

from cctsim import bench

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def catalog():
    return {e.name: e for e in bench.planted_targets()}


@pytest.fixture(scope="session")
def enumerations(catalog):
    return {name: bench.brute_force_interleavings(e.program) for name, e in catalog.items()}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
