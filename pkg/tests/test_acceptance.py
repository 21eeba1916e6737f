"""Acceptance criteria A-H at their stated tolerances.

Each test prints one PASS/FAIL line, collected in the terminal summary.
"""
import pytest

from bclab.acceptance import CRITERIA

from conftest import ACCEPTANCE_LINES


@pytest.mark.parametrize("key", sorted(CRITERIA))
def test_criterion(key):
    crit = CRITERIA[key]()
    line = crit.line()
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert crit.passed, line
