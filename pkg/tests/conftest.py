import numpy as np
import pytest

from garmentdyn.assets import cape, toy_humanoid
from garmentdyn.energy import MaterialParams


@pytest.fixture(scope="session")
def mat():
    return MaterialParams()


@pytest.fixture(scope="session")
def humanoid():
    return toy_humanoid()


@pytest.fixture(scope="session")
def cape_mesh():
    return cape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one verdict line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
