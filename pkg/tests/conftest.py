import numpy as np
import pytest

_CRITERIA = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion; the outcome is printed in the terminal summary."""
    entry = {"name": request.node.name, "detail": "", "passed": None}
    _CRITERIA.append(entry)

    def note(name, detail=""):
        entry["name"], entry["detail"] = name, detail

    yield note
    rep = getattr(request.node, "rep_call", None)
    entry["passed"] = bool(rep and rep.passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for c in _CRITERIA:
        status = "PASS" if c["passed"] else "FAIL"
        line = f"{status}  {c['name']}"
        if c["detail"]:
            line += f"  [{c['detail']}]"
        terminalreporter.write_line(line)
