import re

import pytest

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_outcomes: dict[int, tuple[str, str]] = {}
_notes: list[str] = []


@pytest.fixture
def note():
    """Record a measured value for the end-of-run summary."""
    def record(label, **values):
        _notes.append(f"[{label}] " + " ".join(f"{k}={v}" for k, v in values.items()))
    return record


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    num = int(m.group(1))
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    prev = _outcomes.get(num)
    # a criterion split over several tests keeps its first name and its worst outcome
    if prev is None:
        _outcomes[num] = (status, m.group(2).replace("_", " "))
    elif prev[0] == "PASS":
        _outcomes[num] = (status, prev[1])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_outcomes):
        status, name = _outcomes[num]
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {name}")
    for line in _notes:
        terminalreporter.write_line(line)
