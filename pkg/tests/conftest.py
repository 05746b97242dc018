import logging

import pytest

from obstacle_fem.benchmark import build_exact_solution
from obstacle_fem.mesh import generate_disk_mesh

logging.getLogger("obstacle_fem").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def exact():
    return build_exact_solution()


@pytest.fixture(scope="session")
def coarse_mesh():
    return generate_disk_mesh(2.0, 0.5)


@pytest.fixture(scope="session")
def tiny_mesh():
    return generate_disk_mesh(2.0, 1.0)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report(capsys):
    """Record one acceptance line; it is echoed live and in the terminal summary."""

    def emit(number, ok, detail):
        # ok=None marks an informational line that carries no verdict
        status = "INFO" if ok is None else ("PASS" if ok else "FAIL")
        line = f"CRITERION {number:>2}: {status}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
