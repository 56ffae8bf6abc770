import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def measured(request):
    """Per-test dict of measured values echoed in the acceptance summary."""
    marker = request.node.get_closest_marker("criterion")
    values = {}
    if marker is not None:
        _CRITERIA.setdefault(marker.args[0], {"ok": True, "values": {}})["values"] = values
    return values


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when == "teardown" and rep.passed:
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"ok": True, "values": {}})
    if rep.failed or rep.skipped:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = ", ".join(f"{k}={v}" for k, v in e["values"].items())
        terminalreporter.write_line(f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'}"
                                    + (f"  ({detail})" if detail else ""))
