from __future__ import annotations

import pytest

# criterion number -> (title, outcome, detail)
_ACCEPTANCE: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")


@pytest.fixture
def verdict(request):
    """Record a one-line measurement summary for the acceptance report."""
    marker = request.node.get_closest_marker("criterion")

    def record(detail: str) -> None:
        _ACCEPTANCE.setdefault(marker.args[0], [marker.args[1], None, ""])[2] = detail
        print(f"criterion {marker.args[0]}: {detail}")

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    entry = _ACCEPTANCE.setdefault(marker.args[0], [marker.args[1], None, ""])
    entry[1] = "PASS" if rep.passed else "FAIL"
    if rep.failed and not entry[2]:
        entry[2] = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, outcome, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{outcome or 'NOT RUN'}] {n}. {title} -- {detail}")
