import numpy as np
import pytest

from orthoheat.geometry import ColoredPointCloud, Workspace


@pytest.fixture
def ws():
    return Workspace([-0.5, -0.5, -0.05], [0.5, 0.5, 0.95])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cloud(rng, n, ws, margin=0.0):
    pts = rng.uniform(ws.min_corner + margin, ws.max_corner - margin, size=(n, 3))
    return ColoredPointCloud(pts, rng.uniform(0, 1, size=(n, 3)))


# --------------------------------------------------------------------------
# acceptance summary: tests call ``criterion_log.append((name, ok, detail))``

ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
