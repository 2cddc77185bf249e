import numpy as np
import pytest

from pnrcount.detector import N_BINS, ideal_config
from pnrcount.lut import LutBank, build_lut
from pnrcount.timing import family_model


@pytest.fixture(scope="session")
def default_model():
    return family_model()


@pytest.fixture(scope="session")
def window_bank(default_model):
    """One LUT per bin covering the default 450 ps coincidence window."""
    return LutBank.uniform(build_lut(default_model, 0.0, 1.0, 450), N_BINS)


@pytest.fixture(scope="session")
def ideal():
    return ideal_config()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_CRITERIA = range(1, 10)


@pytest.fixture
def acceptance():
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        passed, detail = ACCEPTANCE_RESULTS.get(n, (False, "not evaluated"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
