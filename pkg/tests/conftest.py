import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and short title")
    config.addinivalue_line("markers", "slow: runs for more than a few seconds")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    n, title = marker.args
    failed = call.excinfo is not None
    prev = _CRITERIA.get(n)
    if call.when == "setup" and not failed:
        return
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    if failed and call.excinfo.typename != "AssertionError":
        detail = (detail + "; " if detail else "") + f"{call.excinfo.typename}: {call.excinfo.value}"
    elif failed:
        msg = str(call.excinfo.value).splitlines()[0] if str(call.excinfo.value) else ""
        detail = (detail + "; " if detail else "") + f"failed check: {msg}"
    ok = not failed and (prev is None or prev[1])
    _CRITERIA[n] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n} [{title}]: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)


@pytest.fixture
def report(record_property):
    """Attach a human-readable measurement line to the acceptance summary."""
    def _report(text):
        print(text)
        record_property("detail", text)
    return _report
