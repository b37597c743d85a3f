import numpy as np
import pytest

from anisofem.analysis import level_data
from anisofem.mesh import build_fichera_macros, build_mesh


@pytest.fixture(scope="session")
def fichera_macros():
    return build_fichera_macros()


@pytest.fixture(scope="session")
def fichera_levels():
    """Mesh, classification, edge assignment and patches for n = 2, 4, 8."""
    return {n: level_data(n) for n in (2, 4, 8)}


@pytest.fixture(scope="session")
def fichera4(fichera_levels):
    return fichera_levels[4].mesh


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


class AcceptanceLog:
    """Collects per-criterion outcomes; a criterion passes only if all its parts pass."""

    def __init__(self):
        self.parts = {}

    def record(self, criterion, ok, detail):
        self.parts.setdefault(criterion, []).append((bool(ok), detail))
        return bool(ok)

    def lines(self):
        out = []
        for c in sorted(self.parts):
            parts = self.parts[c]
            status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
            out.append(f"criterion {c:2d}: {status}  " + "; ".join(d for _, d in parts))
        return out


ACCEPTANCE = AcceptanceLog()


@pytest.fixture(scope="session")
def acceptance():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    lines = ACCEPTANCE.lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
