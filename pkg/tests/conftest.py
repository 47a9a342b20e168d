import re

from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_outcomes: dict[int, list[bool]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or report.failed:
        _outcomes.setdefault(int(m.group(1)), []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}")
