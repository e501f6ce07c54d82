import pytest

_ACCEPTANCE: dict[str, tuple[str, float, str]] = {}


@pytest.fixture
def detail(request):
    """Attach a one-line result summary to an acceptance test report."""

    def record(text: str) -> None:
        request.node.user_properties.append(("detail", text))

    return record


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if report.passed and not hasattr(report, "wasxfail"):
            verdict = "PASS"
        elif hasattr(report, "wasxfail"):
            verdict = "FAIL (known, see notes)"
        else:
            verdict = "FAIL"
        info = "; ".join(v for k, v in report.user_properties if k == "detail")
        _ACCEPTANCE[name] = (verdict, report.duration, info)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        verdict, secs, info = _ACCEPTANCE[name]
        line = f"{name}: {verdict} [{secs:.1f}s]"
        if info:
            line += f" {info}"
        terminalreporter.write_line(line)
