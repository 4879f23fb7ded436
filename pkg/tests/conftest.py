import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def within_sigmas(observed, expected, sd, sigmas=3.0):
    return abs(observed - expected) <= sigmas * sd


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
