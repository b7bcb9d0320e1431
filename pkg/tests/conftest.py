import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (title, outcomes of every test phase tagged with it)
_CRITERIA: dict[int, tuple[str, list[str]]] = {}
# criterion number -> measured values reported by its tests
_NOTES: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _CRITERIA.setdefault(number, (title, []))


@pytest.fixture
def note(request):
    """Record a measured value for the summary line of the test's criterion."""
    number = request.node.get_closest_marker("criterion").args[0]
    return lambda text: _NOTES.setdefault(number, []).append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    # a setup error (e.g. a failing shared training fixture) counts against the criterion too
    if report.when == "call" or report.outcome != "passed":
        _CRITERIA[mark.args[0]][1].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[number]
        if not outcomes:
            status = "NOT RUN"
        elif any(o == "failed" for o in outcomes):
            status = "FAIL"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "SKIPPED"
        extra = f"  ({'; '.join(_NOTES[number])})" if number in _NOTES else ""
        terminalreporter.write_line(f"criterion {number:>2} {title}: {status}{extra}")
