import numpy as np
import pytest

from harmap_dn.geometry import MetricField, TargetMetric
from harmap_dn.grid import GridDomain

Q = (0.1, 0.2)


@pytest.fixture
def flat_g():
    return MetricField.euclidean()


@pytest.fixture
def conformal_h():
    return TargetMetric.conformal(2, "0.3*y1 - 0.2*y2 + 0.4*y1*y2")


@pytest.fixture
def poly_h():
    return TargetMetric.polynomial_perturbation(
        2, 0.5, [["y1*y2", "y1^2"], ["y1^2", "y2^2 + y1"]])


@pytest.fixture
def grid16():
    return GridDomain(16)


def library_directions(grid, *specs):
    """Boundary directions from ``(fx, fy)`` callables, shape ``(n, 4 n_cells)``."""
    return [np.array([grid.sample_boundary(fx), grid.sample_boundary(fy)]) for fx, fy in specs]


ACCEPTANCE = {}


def record(number, label, passed, detail):
    """Store one part of an acceptance criterion and echo it."""
    ACCEPTANCE.setdefault(number, []).append((label, bool(passed), detail))
    print(f"criterion {number} [{label}] {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{label}: {text}" for label, _, text in parts)
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {detail}")
