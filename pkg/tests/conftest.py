import numpy as np
import pytest

from finsler_blowup.geometry import DomainSpec, build_grid, distance_fast_march
from finsler_blowup.norms import NormSpec

ELLIPSE_A = np.diag([4.0, 1.0])


@pytest.fixture(scope="session")
def euclid():
    return NormSpec.euclidean()


@pytest.fixture(scope="session")
def disk():
    return DomainSpec.disk(1.0)


@pytest.fixture(scope="session")
def disk32(euclid, disk):
    return distance_fast_march(build_grid(disk, 32), euclid)


@pytest.fixture(scope="session")
def disk64(euclid, disk):
    return distance_fast_march(build_grid(disk, 64), euclid)


@pytest.fixture(scope="session")
def norm_families():
    return {
        "Euclidean": NormSpec.euclidean(),
        "Ellipse": NormSpec.ellipse(ELLIPSE_A),
        "SmoothedLp": NormSpec.smoothed_lp(4.0, 0.05),
    }


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def _report(label: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
