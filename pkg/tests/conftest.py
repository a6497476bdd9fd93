"""Collects acceptance-criterion outcomes and prints one line per criterion after the run."""
import pytest

_OUTCOMES: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.skipped:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        _OUTCOMES[n] = ("SKIP", reason.removeprefix("Skipped: "))
    elif report.when == "call" or report.failed:
        if report.failed:
            msg = str(report.longrepr).strip().splitlines()[-1] if report.longrepr else ""
            _OUTCOMES[n] = ("FAIL", "; ".join(x for x in (detail, msg) if x))
        else:
            _OUTCOMES[n] = ("PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        status, detail = _OUTCOMES[n]
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  ({detail})" if detail else ""))
