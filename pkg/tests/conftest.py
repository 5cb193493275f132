import numpy as np
import pytest

from gridflow.model import henon_model, linear_model


@pytest.fixture
def henon():
    return henon_model()


@pytest.fixture
def identity2d():
    def make(q=0.01):
        return linear_model(np.eye(2), [[1.0, 0.0]], q * np.eye(2), [[1.0]], [0.0, 0.0], np.eye(2), name="identity")
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, printed once at the end of the session
_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(criterion, passed, detail):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.setdefault(criterion, []).append((passed, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE, key=lambda c: (int(str(c).rstrip("ab")), str(c))):
        for _, line in _ACCEPTANCE[criterion]:
            terminalreporter.write_line(line)
