import re

import numpy as np
import pytest

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_verdicts = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    n = int(m.group(1))
    ok, notes = _verdicts.get(n, (True, []))
    notes = notes + [str(v) for k, v in report.user_properties if k == "measured"]
    _verdicts[n] = (ok and report.passed, notes)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    from test_acceptance import CRITERIA

    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_verdicts):
        ok, notes = _verdicts[n]
        detail = "; ".join(notes)
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {CRITERIA[n]}" + (f"  [{detail}]" if detail else ""))
