import sys

import numpy as np
import pytest
from hypothesis import settings

from snapml.operators import SystemSpec

settings.register_profile("snapml", deadline=None, max_examples=50)
settings.load_profile("snapml")


@pytest.fixture(scope="session")
def system():
    return SystemSpec()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
