"""Collects acceptance-criterion outcomes and prints one verdict line per criterion."""

import pytest

_verdicts: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): test backs the named acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        if hasattr(rep, "wasxfail"):
            verdict = "FAIL (known, see decisions ledger)"
        elif rep.skipped:
            verdict = "NOT REPRODUCIBLE (" + str(rep.longrepr[2]).removeprefix("Skipped: ") + ")"
        else:
            verdict = "PASS" if rep.passed else "FAIL"
        prev = _verdicts.get(name)
        # a criterion backed by several tests passes only if all of them do
        if prev is None or prev == "PASS":
            _verdicts[name] = verdict
    elif rep.failed:
        _verdicts[name] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    width = max(len(n) for n in _verdicts)
    for name, verdict in _verdicts.items():
        terminalreporter.write_line(f"{name.ljust(width)}  {verdict}")
