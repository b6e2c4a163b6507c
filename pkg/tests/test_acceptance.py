"""One test per acceptance criterion; each emits a single PASS/FAIL line.

The lines are printed (visible with ``-s``) and repeated in the terminal
summary by ``conftest.py``. ``entropy-dynamics acceptance`` prints the same.
"""

import time

import pytest

from entropy_dynamics.acceptance import CRITERIA, CriterionResult, _run_one, c14

RESULTS = {}


@pytest.mark.parametrize("cid", [c for c in CRITERIA if c != "c14"])
def test_criterion(cid):
    res = _run_one(cid)
    RESULTS[cid] = res
    print(res.line())
    assert res.passed, res.line()


def test_c14_determinism_and_budget():
    # reuses the results above so every criterion is rerun exactly once
    t0 = time.perf_counter()
    passed, detail = c14(previous=dict(RESULTS))
    res = CriterionResult("c14", CRITERIA["c14"][0], bool(passed), detail, time.perf_counter() - t0)
    RESULTS["c14"] = res
    print(res.line())
    assert res.passed, res.line()
