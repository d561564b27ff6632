"""Shared pytest wiring: a per-criterion summary for the acceptance suite."""

_acceptance_results = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if name.startswith("test_"):
        name = name[len("test_"):]
    _acceptance_results[name] = report.passed


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, passed in _acceptance_results.items():
        terminalreporter.write_line(
            f"[ACCEPT] {name} {'PASS' if passed else 'FAIL'}")
