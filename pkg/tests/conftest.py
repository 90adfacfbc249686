import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
