import time

import pytest

# criterion id -> (description, outcome, seconds)
CRITERIA: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, text): acceptance criterion carried by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    cid, text = mark.args
    entry = CRITERIA.setdefault(cid, [text, "PASS", 0.0])
    if rep.failed:
        entry[1] = "FAIL"
    elif rep.skipped and entry[1] == "PASS":
        entry[1] = "SKIP"
    entry[2] += rep.duration


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(CRITERIA, key=lambda c: int(c[2:])):
        text, status, secs = CRITERIA[cid]
        terminalreporter.write_line(f"{cid:<5} {status}  {text}  ({secs:.2f} s)")


@pytest.fixture
def timer():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start
