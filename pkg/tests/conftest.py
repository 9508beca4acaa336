import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store an acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f'criterion {criterion}: {"PASS" if passed else "FAIL"} - {detail}')


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section('acceptance criteria')
    for criterion in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(
            f'criterion {criterion}: {"PASS" if passed else "FAIL"} - {detail}')


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
