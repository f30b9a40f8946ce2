import re

import numpy as np
import pytest

_VERDICTS = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def criterion(request):
    """Record the verdict of one acceptance criterion; defaults to FAIL until recorded."""
    number = int(re.search(r"criterion_(\d+)", request.node.name).group(1))
    _VERDICTS[number] = ("", False, "did not complete")

    def record(name, passed, detail=""):
        _VERDICTS[number] = (name, bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        name, ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
